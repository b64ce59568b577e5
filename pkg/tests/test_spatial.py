import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import activation_naive, chessboard_distance_naive
from structreid.codebook import CodewordImage
from structreid.errors import DimMismatch, EmptyEntity, ParseError
from structreid.spatial import (KernelKind, KernelSpec, activation_map, distance_transform,
                                distance_transform_mask, kappa, read_activation_map, write_activation_map)

KINDS = ["tgauss", "tlinear", "box"]


def test_kernel_values():
    assert kappa(KernelSpec("tlinear", 4), 2) == 0.5
    assert kappa(KernelSpec("box", 3), 4) == 0.0
    assert kappa(KernelSpec("box", 3), 3) == 1.0
    assert kappa(KernelSpec("tgauss", 1.5), 0) == 1.0
    assert kappa(KernelSpec("tgauss", 2), 2) == math.exp(-1)
    assert kappa(KernelSpec("tgauss", 2), 4.5) == 0.0  # beyond alpha = 2 sigma
    assert kappa(KernelSpec("tgauss", 2, alpha=10), 4.5) == math.exp(-2.25)


@pytest.mark.parametrize("kind", KINDS)
def test_kernel_infinite_distance_is_zero(kind):
    assert kappa(KernelSpec(kind, 2.0), math.inf) == 0.0
    assert np.all(kappa(KernelSpec(kind, 2.0), np.array([math.inf, math.inf])) == 0.0)


@settings(max_examples=50)
@given(st.sampled_from(KINDS), st.floats(0.25, 10), st.lists(st.floats(0, 50), min_size=2, max_size=10))
def test_kernel_non_increasing_and_bounded(kind, sigma, ds):
    ds = np.sort(np.array(ds))
    v = kappa(KernelSpec(kind, sigma), ds)
    assert np.all((v >= 0) & (v <= 1))
    assert np.all(np.diff(v) <= 0)


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec("tlinear", 0)
    with pytest.raises(ValueError):
        KernelSpec("box", -1)
    with pytest.raises(ValueError):
        KernelSpec("tgauss", 1, alpha=math.inf)
    with pytest.raises(ValueError):
        KernelSpec("cosine", 1)
    assert KernelSpec("tgauss", 3).alpha == 6
    assert KernelSpec().kind is KernelKind.BOX
    with pytest.raises(ValueError):
        kappa(KernelSpec(), -1)


@settings(max_examples=60, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_distance_transform_matches_naive(mask):
    assert np.array_equal(distance_transform_mask(mask), chessboard_distance_naive(mask))


def test_distance_transform_examples():
    d = distance_transform([(0, 0)], (3, 4))
    assert d.tolist() == [[0, 1, 2, 3], [1, 1, 2, 3], [2, 2, 2, 3]]
    assert np.all(np.isinf(distance_transform([], (2, 2))))
    stacked = distance_transform_mask(np.array([[[True, False]], [[False, True]]]))
    assert stacked.tolist() == [[[0, 1]], [[1, 0]]]


@pytest.mark.parametrize("kind", KINDS)
def test_activation_matches_naive(kind):
    rng = np.random.default_rng(KINDS.index(kind))
    for _ in range(10):
        k = int(rng.integers(2, 7))
        grids = [rng.integers(0, k, size=(16, 8)) for _ in range(int(rng.integers(1, 3)))]
        spec = KernelSpec(kind, float(rng.choice([1.0, 2.0, 2.5, 3.0])))
        am = activation_map([CodewordImage(g, k, "e", 1) for g in grids], spec)
        expect = activation_naive(grids, k, kind, spec.sigma, spec.alpha)
        assert am.values.dtype == np.float32
        assert np.array_equal(am.values, expect)


@pytest.mark.parametrize("m", [2, 5])
@pytest.mark.parametrize("kind", KINDS)
def test_identical_shots_equal_single(kind, m):
    g = np.random.default_rng(m).integers(0, 5, size=(12, 6))
    img = CodewordImage(g, 5, "e", 2)
    spec = KernelSpec(kind, 2.5)
    one = activation_map([img], spec)
    many = activation_map([img] * m, spec)
    assert np.array_equal(one.values, many.values)


def test_absent_codeword_is_zero_and_present_is_one():
    g = np.zeros((4, 4), dtype=int)
    g[1, 1] = 2
    am = activation_map([CodewordImage(g, 4)], KernelSpec("box", 1))
    assert np.all(am.values[1] == 0) and np.all(am.values[3] == 0)
    assert am.values[2, 1, 1] == 1.0 and am.values[2, 3, 3] == 0.0
    assert np.all(am.values[0] == 1.0)


def test_point_support_with_zero_width_box():
    g = np.zeros((5, 4), dtype=int)
    g[2, 1] = 1
    am = activation_map([CodewordImage(g, 2)], KernelSpec("box", 0))
    expect = np.zeros((5, 4), dtype=np.float32)
    expect[2, 1] = 1
    assert np.array_equal(am.values[1], expect)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_activation_range_and_presence(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 8))
    imgs = [CodewordImage(rng.integers(0, k, size=(6, 5)), k) for _ in range(int(rng.integers(1, 4)))]
    am = activation_map(imgs, KernelSpec(str(rng.choice(KINDS)), float(rng.uniform(0.5, 4))))
    assert np.all((am.values >= 0) & (am.values <= 1))
    present = np.zeros(k, dtype=bool)
    for ci in imgs:
        present[np.unique(ci.grid)] = True
    assert np.array_equal(am.values.sum(axis=(1, 2)) > 0, present)


def test_activation_errors():
    with pytest.raises(EmptyEntity):
        activation_map([], KernelSpec())
    a = CodewordImage(np.zeros((3, 3), dtype=int), 2)
    b = CodewordImage(np.zeros((3, 4), dtype=int), 2)
    with pytest.raises(DimMismatch):
        activation_map([a, b], KernelSpec())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(KINDS), st.text(max_size=6))
def test_activation_file_round_trip(tmp_path_factory, seed, kind, eid):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 6))
    g = rng.integers(0, k, size=(int(rng.integers(1, 9)), int(rng.integers(1, 9))))
    am = activation_map([CodewordImage(g, k, eid, 2)], KernelSpec(kind, 1.0))
    p = tmp_path_factory.mktemp("pram") / "a.pram"
    write_activation_map(p, am)
    back = read_activation_map(p)
    assert back.entity_id == eid and back.view == 2
    assert np.array_equal(back.values, am.values)


def test_activation_file_corrupt(tmp_path):
    am = activation_map([CodewordImage(np.eye(4, dtype=int), 3)], KernelSpec("box", 1))
    p = tmp_path / "a.pram"
    write_activation_map(p, am)
    raw = p.read_bytes()
    p.write_bytes(raw[:-2])
    with pytest.raises(ParseError):
        read_activation_map(p)
    p.write_bytes(raw + b"\0")
    with pytest.raises(ParseError):
        read_activation_map(p)
