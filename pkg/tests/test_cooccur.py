import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cooccurrence_naive
from structreid.codebook import CodewordImage
from structreid.cooccur import (CooccurrenceDescriptor, DescriptorSet, ModelWeights, SparseVector,
                                aggregate_basis, cooccurrence, pack_index, pairwise_descriptors,
                                read_descriptor, read_weights, score, similarity_matrix, unpack_index,
                                write_descriptor, write_weights)
from structreid.errors import DimMismatch, IndexOutOfRange, ParseError
from structreid.spatial import ActivationMap, KernelSpec, activation_map


def random_map(rng, k, shape=(8, 4), eid="x", view=1, density=0.6):
    v = rng.random((k,) + shape) * (rng.random((k,) + shape) < density)
    return ActivationMap(eid, view, v.astype(np.float32))


def test_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = random_map(rng, 6, eid="p"), random_map(rng, 6, eid="g", view=2)
        d = cooccurrence(a, b)
        dense = cooccurrence_naive(a.values, b.values)
        assert np.max(np.abs(d.to_dense().reshape(6, 6) - dense)) <= 1e-12
        assert d.probe_id == "p" and d.gallery_id == "g"
        assert np.all(d.values != 0)


def test_constant_and_disjoint_maps():
    ones = ActivationMap("a", 1, np.ones((2, 3, 3), dtype=np.float32))
    d = cooccurrence(ones, ActivationMap("b", 2, np.ones((2, 3, 3), dtype=np.float32)))
    assert d.entry(1, 0) == 1.0
    ga = np.zeros((3, 3), dtype=int)
    gb = np.ones((3, 3), dtype=int)
    ga[0, 0], gb[0, 0] = 1, 0
    am = activation_map([CodewordImage(ga, 2)], KernelSpec("box", 0))
    bm = activation_map([CodewordImage(gb, 2)], KernelSpec("box", 0))
    # codeword 1 in a sits only at (0, 0); codeword 1 in b is everywhere else
    assert cooccurrence(am, bm).entry(1, 1) == 0.0


def test_grid_mismatch():
    rng = np.random.default_rng(1)
    with pytest.raises(DimMismatch):
        cooccurrence(random_map(rng, 2, (3, 3)), random_map(rng, 2, (3, 4)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 3), st.floats(0.1, 3))
def test_bilinear_and_swap(seed, ca, cb):
    rng = np.random.default_rng(seed)
    a, b = random_map(rng, 3), random_map(rng, 4)
    base = cooccurrence(a, b).to_dense().reshape(3, 4)
    scaled = cooccurrence(ActivationMap("x", 1, (a.values * np.float32(ca))),
                          ActivationMap("x", 1, (b.values * np.float32(cb)))).to_dense().reshape(3, 4)
    expect = cooccurrence_naive(a.values * np.float32(ca), b.values * np.float32(cb))
    assert np.allclose(scaled, expect, atol=1e-12)
    assert np.allclose(scaled, base * np.float32(ca) * np.float32(cb), rtol=1e-5)
    swapped = cooccurrence(b, a).to_dense().reshape(4, 3)
    assert np.allclose(swapped, base.T, atol=1e-15)
    nz_a = int((a.values.sum(axis=(1, 2)) > 0).sum())
    nz_b = int((b.values.sum(axis=(1, 2)) > 0).sum())
    assert cooccurrence(a, b).nnz <= nz_a * nz_b


def test_pack_unpack():
    idx = pack_index([0, 2, 4], [3, 0, 1], 5)
    assert idx.tolist() == [3, 10, 21]
    u, v = unpack_index(idx, 5)
    assert u.tolist() == [0, 2, 4] and v.tolist() == [3, 0, 1]


def test_sparse_vector_basics():
    sv = SparseVector(6, [4, 1], [2.0, -1.0])
    assert sv.indices.tolist() == [1, 4]
    assert sv.to_dense().tolist() == [0, -1, 0, 0, 2, 0]
    assert sv.dot(np.arange(6)) == 7.0
    assert SparseVector.from_dense(sv.to_dense()).as_dict() == {1: -1.0, 4: 2.0}
    with pytest.raises(IndexOutOfRange):
        SparseVector(3, [3], [1.0])


def test_score_examples():
    d = CooccurrenceDescriptor(9, [pack_index(1, 2, 3)], [0.5], 3, 3)
    assert score(ModelWeights.zeros(3, 3), d) == 0.0
    w = np.zeros(9)
    w[pack_index(1, 2, 3)] = 2.0
    assert score(ModelWeights(3, 3, w), d) == 1.0
    with pytest.raises(DimMismatch):
        score(ModelWeights.zeros(2, 2), d)


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_score_matches_dense_dot(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=20) * (rng.random(20) < 0.5)
    d = rng.random(20) * (rng.random(20) < 0.4)
    assert score(ModelWeights(4, 5, w), SparseVector.from_dense(d)) == pytest.approx(float(w @ d), abs=1e-12)


def _descs(rng, n1, n2, k=3):
    ps = [random_map(rng, k, eid=f"p{i}") for i in range(n1)]
    gs = [random_map(rng, k, eid=f"g{j}", view=2) for j in range(n2)]
    return ps, gs, {(i, j): cooccurrence(p, g) for i, p in enumerate(ps) for j, g in enumerate(gs)}


def test_aggregate_examples():
    rng = np.random.default_rng(3)
    _, _, descs = _descs(rng, 4, 4)
    assert aggregate_basis(descs, np.zeros((4, 4))).nnz == 0
    y = np.zeros((4, 4), dtype=int)
    y[2, 3] = 1
    assert np.array_equal(aggregate_basis(descs, y).to_dense(), descs[(2, 3)].to_dense())
    eye = np.eye(3, dtype=int)
    sub = {k: v for k, v in descs.items() if k[0] < 3 and k[1] < 3}
    manual = descs[(0, 0)].to_dense() + descs[(1, 1)].to_dense() + descs[(2, 2)].to_dense()
    assert np.allclose(aggregate_basis(sub, eye).to_dense(), manual, atol=1e-15)
    with pytest.raises(IndexOutOfRange):
        aggregate_basis(descs, np.zeros((2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_score_distributes_over_basis(seed):
    rng = np.random.default_rng(seed)
    _, _, descs = _descs(rng, 3, 4)
    y = (rng.random((3, 4)) < 0.4).astype(int)
    w = ModelWeights(3, 3, rng.normal(size=9))
    lhs = sum(score(w, descs[(i, j)]) for i, j in zip(*np.nonzero(y)))
    assert lhs == pytest.approx(score(w, aggregate_basis(descs, y)), abs=1e-12)


def test_descriptor_set_matches_pairwise_and_similarity():
    rng = np.random.default_rng(4)
    ps, gs, descs = _descs(rng, 3, 5, k=4)
    ds = pairwise_descriptors(ps, gs)
    assert ds.shape == (3, 5)
    for (i, j), d in descs.items():
        assert np.allclose(ds.descriptor(i, j).to_dense(), d.to_dense(), atol=1e-15)
    w = ModelWeights(4, 4, rng.normal(size=16))
    s = similarity_matrix(w, ps, gs)
    expect = np.array([[score(w, descs[(i, j)]) for j in range(5)] for i in range(3)])
    assert np.allclose(s, expect, atol=1e-12)
    assert np.allclose(ds.scores(w), expect, atol=1e-12)
    y = (rng.random((3, 5)) < 0.5).astype(int)
    assert np.allclose(ds.basis(y), aggregate_basis(descs, y).to_dense(), atol=1e-14)
    back = DescriptorSet.from_mapping(ds.as_mapping(), 3, 5, 4, 4)
    assert np.allclose(back.matrix.toarray(), ds.matrix.toarray())


def test_pairwise_chunking(monkeypatch):
    import structreid.cooccur as mod
    rng = np.random.default_rng(5)
    ps, gs, _ = _descs(rng, 2, 7)
    full = pairwise_descriptors(ps, gs).matrix.toarray()
    monkeypatch.setattr(mod, "_BLOCK_BUDGET", 9)
    # BLAS may sum in a different order per block size, so allow last-bit differences
    assert np.allclose(pairwise_descriptors(ps, gs).matrix.toarray(), full, rtol=1e-14, atol=0)


def test_empty_sides():
    rng = np.random.default_rng(6)
    ps, _, _ = _descs(rng, 2, 0)
    assert pairwise_descriptors(ps, []).shape == (2, 0)
    assert similarity_matrix(ModelWeights.zeros(3, 3), [], ps).shape == (0, 2)


def test_descriptor_file_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    d = cooccurrence(random_map(rng, 5, eid="probe-ü"), random_map(rng, 4, eid="g", view=2))
    p = tmp_path / "d.prco"
    write_descriptor(p, d)
    back = read_descriptor(p)
    assert (back.probe_id, back.gallery_id, back.k1, back.k2) == ("probe-ü", "g", 5, 4)
    assert np.array_equal(back.indices, d.indices)
    assert np.array_equal(back.values, d.values.astype(np.float32))
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(ParseError):
        read_descriptor(p)


def test_weights_file_round_trip(tmp_path):
    v = np.zeros(12)
    v[[1, 7]] = [0.25, -3.5]
    w = ModelWeights(3, 4, v)
    p = tmp_path / "w.prwt"
    write_weights(p, w)
    back = read_weights(p)
    assert (back.k1, back.k2) == (3, 4)
    assert np.array_equal(back.vector, v)
    assert back.matrix[1, 3] == -3.5
    with pytest.raises(DimMismatch):
        ModelWeights(3, 3, np.zeros(4))
