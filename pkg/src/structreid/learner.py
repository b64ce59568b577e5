"""1-slack cutting-plane training of the co-occurrence weights.

Solves ``min 0.5 |w|^2 + C xi`` subject to
``w . (f(y) - f(y_bar)) >= loss(y, y_bar) - xi`` for every feasible
structure ``y_bar``, where ``f(y)`` sums the descriptors of the pairs that
``y`` selects. Constraints are generated lazily: each round the restricted
QP over the current working set is re-solved and the structure maximising
``w . f(y_bar) + loss(y, y_bar)`` is added.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .cooccur import DescriptorSet, ModelWeights, SparseVector
from .errors import Divergence, MissingDescriptor
from .matcher import FeasibleSetSpec, loss, loss_augmented_inference

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    C: float = 10.0
    max_planes: int = 200
    violation_tol: float = 1e-3
    warm_start_samples: int = 10
    seed: int = 0
    qp_tol: float = 1e-6
    qp_max_iters: int = 200_000

    def __post_init__(self):
        if self.C < 0:
            raise ValueError("C must be >= 0")
        if self.violation_tol <= 0 or self.qp_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class QPSolution:
    w: np.ndarray
    xi: float
    alpha: np.ndarray
    dual_objective: float
    primal_objective: float
    iterations: int


def _pairwise_ascent(gram: np.ndarray, delta: np.ndarray, C: float, qp_tol: float,
                     alpha0: np.ndarray | None, max_iters: int) -> tuple[np.ndarray, int]:
    k = len(delta)
    # index 0 is the slack plane: zero vector, zero loss
    G = np.zeros((k + 1, k + 1))
    G[1:, 1:] = gram
    D = np.concatenate([[0.0], delta])
    alpha = np.zeros(k + 1)
    if alpha0 is not None and len(alpha0):
        alpha[1:len(alpha0) + 1] = alpha0
    alpha[0] = max(0.0, C - alpha[1:].sum())
    if C == 0:
        alpha[:] = 0.0
    grad = D - G @ alpha

    for it in range(max_iters):
        up = int(grad.argmax())
        active = np.flatnonzero(alpha > 0)
        if active.size == 0:
            return alpha[1:], it
        down = int(active[grad[active].argmin()])
        gap = grad[up] - grad[down]
        if gap < qp_tol:
            return alpha[1:], it
        eta = G[up, up] + G[down, down] - 2.0 * G[up, down]
        step = alpha[down] if eta <= 0 else min(alpha[down], gap / eta)
        alpha[up] += step
        alpha[down] -= step
        if alpha[down] < 1e-300:
            alpha[down] = 0.0
        grad -= step * (G[:, up] - G[:, down])
    raise Divergence(f"restricted QP did not reach tolerance {qp_tol} in {max_iters} steps")


def _qp_solution(g: np.ndarray, gram: np.ndarray, delta: np.ndarray, C: float, qp_tol: float,
                 alpha0: np.ndarray | None, max_iters: int) -> QPSolution:
    a, its = _pairwise_ascent(gram, delta, C, qp_tol, alpha0, max_iters)
    w = a @ g
    ww = float(a @ gram @ a)
    xi = max(0.0, float((delta - gram @ a).max()))
    return QPSolution(w, xi, a, float(a @ delta) - 0.5 * ww, 0.5 * ww + C * xi, its)


def solve_restricted_qp(constraints: list[tuple[np.ndarray | SparseVector, float]], C: float,
                        qp_tol: float = 1e-6, alpha0: np.ndarray | None = None,
                        max_iters: int = 200_000) -> QPSolution:
    """Dual of the 1-slack QP by pairwise coordinate ascent.

    The dual is ``max sum_k a_k loss_k - 0.5 |sum_k a_k g_k|^2`` over
    ``a >= 0, sum a <= C``. A zero plane with zero loss absorbs the unused
    budget so the feasible set becomes a scaled simplex; each step moves
    mass from the active multiplier with the smallest gradient to the one
    with the largest. Stops when that gradient gap drops below ``qp_tol``,
    which bounds the duality gap by ``C * qp_tol``.

    ``constraints`` holds ``(g_k, loss_k)``; ``alpha0`` warm-starts the
    multipliers of the leading planes.
    """
    if not constraints:
        raise ValueError("need at least one constraint")
    g = np.stack([c[0].to_dense() if isinstance(c[0], SparseVector) else np.asarray(c[0], float)
                  for c in constraints])
    delta = np.array([float(c[1]) for c in constraints])
    return _qp_solution(g, g @ g.T, delta, C, qp_tol, alpha0, max_iters)


def random_structure(spec: FeasibleSetSpec, rng: np.random.Generator) -> np.ndarray:
    """A random member of the feasible set: probes in random order take random free galleries."""
    n1, n2 = spec.n_probe, spec.n_gallery
    y = np.zeros((n1, n2), dtype=np.int8)
    load = np.zeros(n2, dtype=np.int64)
    for i in rng.permutation(n1):
        free = np.flatnonzero(load < spec.cap)
        k = int(rng.integers(0, min(spec.probe_degrees[i], free.size) + 1))
        if k:
            pick = rng.choice(free, size=k, replace=False)
            y[i, pick] = 1
            load[pick] += 1
    return y


@dataclass
class TrainResult:
    weights: ModelWeights
    xi: float
    violation: float
    converged: bool
    n_planes: int
    objective_history: list[float] = field(default_factory=list)
    primal_history: list[float] = field(default_factory=list)
    violation_history: list[float] = field(default_factory=list)
    working_set: list[np.ndarray] = field(default_factory=list)


def _as_descriptor_set(descriptors, y_true: np.ndarray) -> DescriptorSet:
    if isinstance(descriptors, DescriptorSet):
        return descriptors
    if not descriptors:
        raise MissingDescriptor("no descriptors")
    first = next(iter(descriptors.values()))
    k1 = getattr(first, "k1", 0) or 1
    k2 = getattr(first, "k2", 0) or first.dim
    return DescriptorSet.from_mapping(descriptors, y_true.shape[0], y_true.shape[1], k1, k2)


def train(descriptors: DescriptorSet | Mapping[tuple[int, int], SparseVector], y_true: np.ndarray,
          cfg: TrainConfig = TrainConfig()) -> TrainResult:
    y_true = np.asarray(y_true, dtype=np.int8)
    if isinstance(descriptors, Mapping):
        missing = [(int(i), int(j)) for i, j in zip(*np.nonzero(y_true)) if (i, j) not in descriptors]
        if missing:
            raise MissingDescriptor(f"no descriptor for true pairs {missing[:5]}")
    ds = _as_descriptor_set(descriptors, y_true)
    if ds.shape != y_true.shape:
        raise MissingDescriptor(f"descriptor grid {ds.shape} vs truth {y_true.shape}")
    dim = ds.k1 * ds.k2
    spec = FeasibleSetSpec.from_truth(y_true)
    f_true = ds.basis(y_true)
    rng = np.random.default_rng(cfg.seed)
    if cfg.C == 0:
        # no slack budget: the optimum is w = 0 whatever the constraints
        zero = ModelWeights.zeros(ds.k1, ds.k2)
        hinge = float(loss(y_true, loss_augmented_inference(ds.scores(zero), y_true, spec).y))
        return TrainResult(zero, hinge, 0.0, True, 0, [0.0], [0.0], [0.0])

    capacity = cfg.warm_start_samples + cfg.max_planes + 1
    planes = np.zeros((capacity, dim))
    gram = np.zeros((capacity, capacity))
    losses: list[float] = []
    structures: list[np.ndarray] = []

    def add(y_bar):
        k = len(losses)
        planes[k] = f_true - ds.basis(y_bar)
        col = planes[:k + 1] @ planes[k]
        gram[k, :k + 1] = col
        gram[:k + 1, k] = col
        losses.append(float(loss(y_true, y_bar)))
        structures.append(y_bar)

    for _ in range(cfg.warm_start_samples):
        add(random_structure(spec, rng))
    if not losses:
        add(np.zeros_like(y_true))

    result = TrainResult(ModelWeights.zeros(ds.k1, ds.k2), 0.0, np.inf, False, 0)
    alpha = None
    n_added = 0
    while True:
        k = len(losses)
        qp = _qp_solution(planes[:k], gram[:k, :k], np.array(losses), cfg.C, cfg.qp_tol, alpha,
                          cfg.qp_max_iters)
        alpha = qp.alpha
        result.objective_history.append(qp.dual_objective)
        result.primal_history.append(qp.primal_objective)
        weights = ModelWeights(ds.k1, ds.k2, qp.w)
        most = loss_augmented_inference(ds.scores(weights), y_true, spec).y
        hinge = loss(y_true, most) - float(qp.w @ (f_true - ds.basis(most)))
        violation = hinge - qp.xi
        result.violation_history.append(violation)
        log.debug("plane %d: xi=%.6g violation=%.6g dual=%.6g", n_added, qp.xi, violation,
                  qp.dual_objective)
        result.weights, result.xi, result.violation = weights, qp.xi, violation
        if violation < cfg.violation_tol:
            result.converged = True
            break
        if n_added >= cfg.max_planes:
            break
        add(most)
        n_added += 1
    result.n_planes = n_added
    result.working_set = structures
    return result
