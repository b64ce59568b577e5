import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
import cvxpy as cp

from structreid.cooccur import DescriptorSet, SparseVector, pairwise_descriptors
from structreid.errors import MissingDescriptor
from structreid.learner import TrainConfig, random_structure, solve_restricted_qp, train
from structreid.matcher import FeasibleSetSpec, loss, solve_matching
from structreid.spatial import KernelSpec, activation_map
from structreid.synthetic import SyntheticSpec, generate_synthetic


def reference_qp(g, delta, C):
    """min 0.5|w|^2 + C xi  s.t.  g_k . w >= delta_k - xi, xi >= 0, by an interior-point QP solver."""
    w, xi = cp.Variable(g.shape[1]), cp.Variable()
    prob = cp.Problem(cp.Minimize(0.5 * cp.sum_squares(w) + C * xi), [g @ w >= delta - xi, xi >= 0])
    prob.solve(solver=cp.CLARABEL)
    assert prob.status == cp.OPTIMAL
    return w.value, prob.value


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.floats(0.1, 50), st.integers(0, 2**32 - 1))
def test_restricted_qp_matches_reference_solver(k, d, C, seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(k, d))
    delta = rng.integers(0, 6, size=k).astype(float)
    sol = solve_restricted_qp([(g[i], delta[i]) for i in range(k)], C, qp_tol=1e-10)
    w_ref, f_ref = reference_qp(g, delta, C)
    assert sol.primal_objective == pytest.approx(f_ref, rel=1e-5, abs=1e-6)
    assert np.allclose(sol.w, w_ref, atol=1e-3 * (1 + np.abs(w_ref).max()))
    # weak duality, with the gap bounded by C * qp_tol
    assert sol.dual_objective <= sol.primal_objective + 1e-9
    assert sol.primal_objective - sol.dual_objective <= C * 1e-10 * 10 + 1e-9
    assert np.all(sol.alpha >= 0) and sol.alpha.sum() <= C + 1e-9


def test_restricted_qp_accepts_sparse_and_warm_start():
    g = [SparseVector(3, [0], [1.0]), SparseVector(3, [1, 2], [1.0, -1.0])]
    cold = solve_restricted_qp([(g[0], 1.0), (g[1], 2.0)], 5.0)
    warm = solve_restricted_qp([(g[0], 1.0), (g[1], 2.0)], 5.0, alpha0=cold.alpha)
    assert np.allclose(cold.w, warm.w, atol=1e-6)
    assert warm.iterations <= cold.iterations
    assert np.allclose(cold.w, [1.0, 1.0, -1.0], atol=1e-5)
    assert cold.xi == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValueError):
        solve_restricted_qp([], 1.0)


@settings(max_examples=60)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_random_structures_are_feasible(n1, n2, r, seed):
    spec = FeasibleSetSpec.uniform(r, n1, n2)
    y = random_structure(spec, np.random.default_rng(seed))
    assert spec.is_feasible(y)


def small_problem(seed=0, n=8, k=6):
    train_split, _ = generate_synthetic(SyntheticSpec(n_entities=n, n_codewords=k, grid=(12, 6),
                                                      jitter=1, seed=seed))
    ks = KernelSpec("box", 1)
    ps = [activation_map(x, ks) for x in train_split.probes]
    gs = [activation_map(x, ks) for x in train_split.galleries]
    return pairwise_descriptors(ps, gs), train_split.truth


def test_training_converges_and_fits_training_data():
    ds, truth = small_problem()
    res = train(ds, truth, TrainConfig(C=10, max_planes=200))
    assert res.converged and res.violation < 1e-3 and res.n_planes <= 200
    hist = np.array(res.objective_history)
    assert np.all(np.diff(hist) >= -1e-9)
    assert np.all(np.array(res.primal_history) >= hist - 1e-9)
    s = ds.scores(res.weights)
    assert np.array_equal(solve_matching(s, FeasibleSetSpec.from_truth(truth)).y, truth)


def test_final_violation_is_exact():
    ds, truth = small_problem(1)
    res = train(ds, truth, TrainConfig(C=1.0))
    spec = FeasibleSetSpec.from_truth(truth)
    f_true = ds.basis(truth)
    w = res.weights.vector
    # brute-force the most violated structure over random feasible structures and the optimum
    rng = np.random.default_rng(0)
    cands = [random_structure(spec, rng) for _ in range(300)]
    worst = max(loss(truth, y) - w @ (f_true - ds.basis(y)) for y in cands)
    assert worst <= res.xi + res.violation + 1e-9


def test_c_zero_gives_zero_weights():
    ds, truth = small_problem(2)
    res = train(ds, truth, TrainConfig(C=0.0))
    assert res.weights.nnz == 0 and res.converged


def test_mapping_input_and_missing_pairs():
    ds, truth = small_problem(3, n=4, k=4)
    a = train(ds, truth, TrainConfig(C=5))
    b = train(ds.as_mapping(), truth, TrainConfig(C=5))
    assert np.allclose(a.weights.vector, b.weights.vector, atol=1e-9)
    partial = ds.as_mapping()
    del partial[(1, 1)]
    with pytest.raises(MissingDescriptor):
        train(partial, truth, TrainConfig())
    with pytest.raises(MissingDescriptor):
        train(ds, truth[:3], TrainConfig())


def test_max_planes_budget_is_respected():
    ds, truth = small_problem(4)
    res = train(ds, truth, TrainConfig(C=100, max_planes=2, violation_tol=1e-9))
    assert res.n_planes <= 2
    assert len(res.objective_history) == res.n_planes + 1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(C=-1)
    with pytest.raises(ValueError):
        TrainConfig(violation_tol=0)


def test_training_is_deterministic():
    ds, truth = small_problem(5)
    a = train(ds, truth, TrainConfig(seed=3))
    b = train(ds, truth, TrainConfig(seed=3))
    assert np.array_equal(a.weights.vector, b.weights.vector)


def test_from_mapping_zero_rows():
    m = {(0, 0): SparseVector(4, [1], [1.0])}
    ds = DescriptorSet.from_mapping(m, 2, 2, 2, 2)
    assert ds.matrix.shape == (4, 4) and ds.matrix.nnz == 1
