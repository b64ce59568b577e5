import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.cluster import KMeans

from structreid.codebook import (Codebook, CodewordImage, KMeansTrace, codeword_support, encode_image,
                                 read_codebook, sample_features, train_codebook, write_codebook)
from structreid.errors import DimensionMismatch, IndexOutOfRange, ParseError, TooFewSamples


def sorted_rows(x):
    x = np.asarray(x)
    return x[np.lexsort(x.T[::-1])]


def test_square_corners():
    pts = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    cb = train_codebook(pts, 4, seed=3)
    assert np.array_equal(sorted_rows(cb.centroids), sorted_rows(pts))
    assert cb.inertia == 0.0


def test_single_centroid_is_mean():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 3))
    cb = train_codebook(x, 1)
    assert np.allclose(cb.centroids[0], x.mean(axis=0), atol=1e-6)


def test_two_blobs_against_sklearn():
    rng = np.random.default_rng(5)
    means = np.array([[0.0, 0.0], [10.0, 0.0]])
    x = np.concatenate([m + 0.3 * rng.standard_normal((200, 2)) for m in means])
    cb = train_codebook(x, 2, seed=1)
    ref = KMeans(n_clusters=2, n_init=20, random_state=0).fit(x).cluster_centers_
    ours = sorted_rows(cb.centroids)
    assert np.allclose(ours, sorted_rows(ref), atol=1e-5)
    assert np.all(np.linalg.norm(ours - means, axis=1) < 1.0)


def test_too_few_samples():
    with pytest.raises(TooFewSamples):
        train_codebook(np.zeros((3, 2)), 4)
    with pytest.raises(TooFewSamples):
        train_codebook(np.array([[0.0], [0.0], [1.0]]), 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_objective_non_increasing(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(60, 3)) + rng.integers(0, 3, size=(60, 1)) * 4
    trace = KMeansTrace()
    train_codebook(x, k, seed=seed, trace=trace)
    inertia = np.array(trace.inertia)
    assert np.all(np.diff(inertia) <= 1e-9 * (1 + inertia[:-1]))


def test_deterministic_by_seed():
    x = np.random.default_rng(2).normal(size=(100, 4))
    a, b = train_codebook(x, 5, seed=9), train_codebook(x, 5, seed=9)
    assert np.array_equal(a.centroids, b.centroids)


def test_encode_exact_and_ties():
    cents = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [7.0, 7.0], [3.0, 0.0]])
    cb = Codebook(1, cents)
    ci = encode_image(np.array([[7.0, 7.0], [2.0, 0.0]]), cb, (1, 2))
    # [2, 0] is 1 away from centroids 1 and 4; the lower index wins
    assert ci.grid.tolist() == [[3, 1]]


def test_encode_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        encode_image(np.zeros((4, 3)), Codebook(1, np.zeros((2, 2))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_encode_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(20, 4))
    cb = Codebook(2, rng.normal(size=(5, 4)))
    ci = encode_image(feats, cb, (4, 5), "e", 2)
    expect = []
    for f in feats:
        d = [float(np.sum((f - c) ** 2)) for c in cb.centroids]
        expect.append(d.index(min(d)))
    assert ci.grid.ravel().tolist() == expect
    assert ci.view == 2 and ci.entity_id == "e"


def test_centroids_encode_to_themselves():
    x = np.random.default_rng(4).normal(size=(80, 3))
    cb = train_codebook(x, 6, seed=0)
    assert encode_image(cb.centroids, cb).grid.ravel().tolist() == list(range(6))


def test_support_examples():
    full = CodewordImage(np.full((2, 3), 2), 4)
    assert codeword_support(full, 2) == {(r, c) for r in range(2) for c in range(3)}
    assert codeword_support(full, 0) == set()
    corners = np.zeros((3, 3), dtype=int)
    corners[[0, 0, 2, 2], [0, 2, 0, 2]] = 1
    assert codeword_support(CodewordImage(corners, 2), 1) == {(0, 0), (0, 2), (2, 0), (2, 2)}
    with pytest.raises(IndexOutOfRange):
        codeword_support(full, 4)


@settings(max_examples=30)
@given(arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, 4)))
def test_supports_partition_grid(grid):
    ci = CodewordImage(grid, 5)
    supports = [codeword_support(ci, u) for u in range(5)]
    assert sum(len(s) for s in supports) == grid.size
    assert set().union(*supports) == {(r, c) for r in range(grid.shape[0]) for c in range(grid.shape[1])}


def test_codeword_image_validation():
    with pytest.raises(ValueError):
        CodewordImage(np.array([[0, 5]]), 5)


def test_sample_features():
    blocks = [np.arange(10).reshape(5, 2), np.arange(10, 20).reshape(5, 2)]
    assert sample_features(blocks, 100, 0).shape == (10, 2)
    a = sample_features(blocks, 4, 1)
    assert a.shape == (4, 2) and np.array_equal(a, sample_features(blocks, 4, 1))


def test_codebook_file_round_trip(tmp_path):
    cb = train_codebook(np.random.default_rng(0).normal(size=(40, 3)), 4, view=2)
    p = tmp_path / "c.prcb"
    write_codebook(p, cb)
    back = read_codebook(p)
    assert back.view == 2
    assert np.array_equal(back.centroids, cb.centroids)
    raw = p.read_bytes()
    write_codebook(p, back)
    assert p.read_bytes() == raw
    p.write_bytes(raw[:-1])
    with pytest.raises(ParseError):
        read_codebook(p)
