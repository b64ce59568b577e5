"""Degree-constrained bipartite matching between probes and galleries.

A structure ``y`` is an N1 x N2 0/1 matrix whose row i has at most ``r_i``
ones and whose every column has at most ``ceil(sum(r) / N2)`` ones. The
matcher maximises ``sum(y * s)`` over such structures.

Two solvers are provided:

* exact: successive shortest paths on the flow network
  source -> probe (cap r_i) -> gallery (cap 1) -> sink (cap gallery_cap).
  The constraint matrix is totally unimodular so the optimum is integral.
  Augmentation stops as soon as the best path no longer increases the
  objective, so edges with non-positive score are never selected unless
  ``saturate`` asks for a maximum-cardinality structure.
* capped: a primal-dual interior-point LP solve cut off after a fixed number
  of iterations, thresholded at 0.5 and repaired to feasibility by dropping
  the lowest-scoring selections in over-full rows and columns.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import DimMismatch, InfeasibleSpec, NonFiniteScore, NumericError

THRESHOLD = 0.5


def gallery_cap(r: Sequence[int], n2: int) -> int:
    if n2 < 1:
        raise ValueError("need at least one gallery")
    total = int(sum(int(x) for x in r))
    return max(1, -(-total // n2))


@dataclass(frozen=True)
class FeasibleSetSpec:
    probe_degrees: tuple[int, ...]
    n_gallery: int

    def __post_init__(self):
        degrees = tuple(int(x) for x in self.probe_degrees)
        if any(x < 0 for x in degrees):
            raise InfeasibleSpec("probe degrees must be non-negative")
        object.__setattr__(self, "probe_degrees", degrees)

    @classmethod
    def uniform(cls, r: int, n1: int, n2: int) -> "FeasibleSetSpec":
        return cls((r,) * n1, n2)

    @classmethod
    def from_truth(cls, y: np.ndarray) -> "FeasibleSetSpec":
        """Every probe gets the largest row degree found in ``y``."""
        y = np.asarray(y)
        r = int(y.sum(axis=1).max()) if y.size else 0
        return cls.uniform(max(r, 1), y.shape[0], y.shape[1])

    @property
    def n_probe(self) -> int:
        return len(self.probe_degrees)

    @property
    def cap(self) -> int:
        return gallery_cap(self.probe_degrees, self.n_gallery) if self.n_gallery else 0

    def is_feasible(self, y: np.ndarray) -> bool:
        y = np.asarray(y)
        if y.shape != (self.n_probe, self.n_gallery):
            return False
        if not np.all((y == 0) | (y == 1)):
            return False
        return bool(np.all(y.sum(axis=1) <= np.array(self.probe_degrees))
                    and np.all(y.sum(axis=0) <= self.cap))


@dataclass(frozen=True)
class MatchResult:
    y: np.ndarray           # int8 structure
    fractional: np.ndarray  # LP values before thresholding (0/1 in exact mode)
    objective: float        # sum(y * s) for the scores that were solved
    iterations: int

    def selected(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.y[i])


def _check_scores(s: np.ndarray, spec: FeasibleSetSpec) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape != (spec.n_probe, spec.n_gallery):
        raise DimMismatch(f"scores of shape {s.shape} vs spec {spec.n_probe}x{spec.n_gallery}")
    if not np.all(np.isfinite(s)):
        raise NonFiniteScore("similarity matrix has non-finite entries")
    return s


def _augmenting_path(s, y, out_deg, in_deg, r, cap, tol):
    """Bellman-Ford shortest path (cost = -score) from source to sink in the residual graph.

    Returns (cost, path) where path alternates probe/gallery indices starting
    at a probe with spare degree and ending at a gallery with spare capacity,
    or (inf, None) when the sink is unreachable.
    """
    n1, n2 = s.shape
    fwd = np.where(y, np.inf, -s)   # probe i -> gallery j, unused edge
    bwd = np.where(y, s, np.inf)    # gallery j -> probe i, undo a used edge
    start = np.where(out_deg < r, 0.0, np.inf)
    dist_p = start.copy()
    pred_p = np.full(n1, -1)
    dist_g = np.full(n2, np.inf)
    pred_g = np.full(n2, -1)
    for _ in range(n1 + n2 + 2):
        cand = dist_p[:, None] + fwd
        arg = cand.argmin(axis=0)
        best = cand[arg, np.arange(n2)]
        better_g = best < dist_g - tol
        dist_g = np.where(better_g, best, dist_g)
        pred_g = np.where(better_g, arg, pred_g)

        cand = dist_g[None, :] + bwd
        arg = cand.argmin(axis=1)
        best = cand[np.arange(n1), arg]
        better_p = best < dist_p - tol
        if not better_p.any():
            break
        dist_p = np.where(better_p, best, dist_p)
        pred_p = np.where(better_p, arg, pred_p)
    else:
        raise NumericError("shortest-path search did not settle (negative cycle?)")

    open_g = np.where(in_deg < cap, dist_g, np.inf)
    j = int(open_g.argmin())
    if not np.isfinite(open_g[j]):
        return math.inf, None
    path = [j]
    for _ in range(n1 + n2 + 1):
        i = int(pred_g[j])
        path.append(i)
        j = int(pred_p[i])
        if j < 0:
            break
        path.append(j)
    else:
        raise NumericError("cycle while tracing augmenting path")
    path.reverse()
    return float(open_g[path[-1]]), path


def _solve_exact(s: np.ndarray, spec: FeasibleSetSpec, saturate: bool) -> tuple[np.ndarray, int]:
    n1, n2 = s.shape
    y = np.zeros((n1, n2), dtype=bool)
    r = np.array(spec.probe_degrees, dtype=np.int64)
    cap = spec.cap
    out_deg = np.zeros(n1, dtype=np.int64)
    in_deg = np.zeros(n2, dtype=np.int64)
    tol = 1e-12 * (1.0 + float(np.abs(s).max(initial=0.0)))
    n_aug = 0
    for n_aug in range(int(min(r.sum(), n2 * cap, n1 * n2)) + 1):
        cost, path = _augmenting_path(s, y, out_deg, in_deg, r, cap, tol)
        if path is None or (not saturate and cost >= -tol):
            break
        # path = [i0, j0, i1, j1, ..., ik, jk]: add (i_t, j_t), remove (i_{t+1}, j_t)
        for t in range(0, len(path), 2):
            i, j = path[t], path[t + 1]
            y[i, j] = True
            if t + 2 < len(path):
                y[path[t + 2], j] = False
        out_deg[path[0]] += 1
        in_deg[path[-1]] += 1
    return y, n_aug


def _solve_ipm(s: np.ndarray, spec: FeasibleSetSpec, max_iters: int) -> tuple[np.ndarray, int]:
    """Mehrotra predictor-corrector on the LP relaxation, stopped after ``max_iters`` iterations.

    Variables are the pair values y (bounded in [0, 1]) plus one slack per
    row and per column constraint. Returns the (possibly fractional, possibly
    slightly infeasible) pair values.
    """
    n1, n2 = s.shape
    r = np.array(spec.probe_degrees, dtype=np.float64)
    cap = float(spec.cap)
    b = np.concatenate([r, np.full(n2, cap)])
    c = -s

    y = np.full((n1, n2), 0.5)
    ty = 1.0 - y
    sr, sc = np.ones(n1), np.ones(n2)
    zy, wy = np.ones((n1, n2)), np.ones((n1, n2))
    zr, zc = np.ones(n1), np.ones(n2)
    lam_r, lam_c = np.zeros(n1), np.zeros(n2)
    n_comp = 2 * n1 * n2 + n1 + n2

    def a_mul(vy, vr, vc):
        return np.concatenate([vy.sum(axis=1) + vr, vy.sum(axis=0) + vc])

    def direction(rp, ru, rd_y, rd_r, rd_c, rxz_y, rtw_y, rxz_r, rxz_c):
        th_y = 1.0 / (zy / y + wy / ty)
        th_r, th_c = sr / zr, sc / zc
        big_r_y = rd_y - rxz_y / y + (rtw_y - wy * ru) / ty
        big_r_r = rd_r - rxz_r / sr
        big_r_c = rd_c - rxz_c / sc
        m = np.zeros((n1 + n2, n1 + n2))
        m[np.arange(n1), np.arange(n1)] = th_y.sum(axis=1) + th_r
        m[n1 + np.arange(n2), n1 + np.arange(n2)] = th_y.sum(axis=0) + th_c
        m[:n1, n1:] = th_y
        m[n1:, :n1] = th_y.T
        rhs = rp + a_mul(th_y * big_r_y, th_r * big_r_r, th_c * big_r_c)
        try:
            dl = scipy.linalg.cho_solve(scipy.linalg.cho_factor(m), rhs)
        except np.linalg.LinAlgError:
            dl = np.linalg.lstsq(m, rhs, rcond=None)[0]
        dlr, dlc = dl[:n1], dl[n1:]
        dy = th_y * (dlr[:, None] + dlc[None, :] - big_r_y)
        dsr = th_r * (dlr - big_r_r)
        dsc = th_c * (dlc - big_r_c)
        dty = ru - dy
        dzy = (rxz_y - zy * dy) / y
        dwy = (rtw_y - wy * dty) / ty
        dzr = (rxz_r - zr * dsr) / sr
        dzc = (rxz_c - zc * dsc) / sc
        return dy, dsr, dsc, dty, dzy, dwy, dzr, dzc, dlr, dlc

    def max_step(pairs):
        alpha = 1.0
        for v, dv in pairs:
            neg = dv < 0
            if neg.any():
                alpha = min(alpha, float((-v[neg] / dv[neg]).min()))
        return alpha

    it = 0
    for it in range(1, max_iters + 1):
        rp = b - a_mul(y, sr, sc)
        ru = 1.0 - y - ty
        rd_y = c - (lam_r[:, None] + lam_c[None, :]) - zy + wy
        rd_r = -lam_r - zr
        rd_c = -lam_c - zc
        mu = (np.sum(y * zy) + np.sum(ty * wy) + sr @ zr + sc @ zc) / n_comp

        aff = direction(rp, ru, rd_y, rd_r, rd_c, -y * zy, -ty * wy, -sr * zr, -sc * zc)
        dy, dsr, dsc, dty, dzy, dwy, dzr, dzc, _, _ = aff
        ap = max_step([(y, dy), (ty, dty), (sr, dsr), (sc, dsc)])
        ad = max_step([(zy, dzy), (wy, dwy), (zr, dzr), (zc, dzc)])
        mu_aff = (np.sum((y + ap * dy) * (zy + ad * dzy)) + np.sum((ty + ap * dty) * (wy + ad * dwy))
                  + (sr + ap * dsr) @ (zr + ad * dzr) + (sc + ap * dsc) @ (zc + ad * dzc)) / n_comp
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        smu = sigma * mu
        dy, dsr, dsc, dty, dzy, dwy, dzr, dzc, dlr, dlc = direction(
            rp, ru, rd_y, rd_r, rd_c,
            smu - y * zy - aff[0] * aff[4], smu - ty * wy - aff[3] * aff[5],
            smu - sr * zr - aff[1] * aff[6], smu - sc * zc - aff[2] * aff[7])
        ap = min(1.0, 0.99 * max_step([(y, dy), (ty, dty), (sr, dsr), (sc, dsc)]))
        ad = min(1.0, 0.99 * max_step([(zy, dzy), (wy, dwy), (zr, dzr), (zc, dzc)]))
        y, ty, sr, sc = y + ap * dy, ty + ap * dty, sr + ap * dsr, sc + ap * dsc
        zy, wy, zr, zc = zy + ad * dzy, wy + ad * dwy, zr + ad * dzr, zc + ad * dzc
        lam_r, lam_c = lam_r + ad * dlr, lam_c + ad * dlc
        if mu < 1e-12 and np.abs(rp).max(initial=0.0) < 1e-10:
            break
    return np.clip(y, 0.0, 1.0), it


def _repair(y: np.ndarray, frac: np.ndarray, s: np.ndarray, spec: FeasibleSetSpec) -> np.ndarray:
    """Drop selections, lowest score first, from rows/columns over their degree bound."""
    y = y.copy()
    r = np.array(spec.probe_degrees)
    rows, cols = y.sum(axis=1), y.sum(axis=0)
    sel_i, sel_j = np.nonzero(y)
    order = np.lexsort((sel_j, sel_i, frac[sel_i, sel_j], s[sel_i, sel_j]))
    for k in order:
        i, j = sel_i[k], sel_j[k]
        if rows[i] > r[i] or cols[j] > spec.cap:
            y[i, j] = False
            rows[i] -= 1
            cols[j] -= 1
    return y


def solve_matching(s: np.ndarray, spec: FeasibleSetSpec, max_lp_iters: int | None = None,
                   saturate: bool = False) -> MatchResult:
    """Best feasible structure for scores ``s``.

    ``max_lp_iters=None`` selects the exact solver; an integer selects the
    capped interior-point solver. ``saturate`` (exact mode) returns the best
    structure among those with the maximum number of selected pairs, which is
    what rank-r retrieval needs when scores can be negative.
    """
    s = _check_scores(s, spec)
    n1, n2 = s.shape
    if n1 == 0 or n2 == 0:
        empty = np.zeros((n1, n2))
        return MatchResult(empty.astype(np.int8), empty, 0.0, 0)
    if max_lp_iters is None:
        y, its = _solve_exact(s, spec, saturate)
        frac = y.astype(np.float64)
    else:
        if max_lp_iters < 1:
            raise ValueError("max_lp_iters must be positive")
        frac, its = _solve_ipm(s, spec, max_lp_iters)
        y = _repair(frac > THRESHOLD, frac, s, spec)
    y8 = y.astype(np.int8)
    return MatchResult(y8, frac, float(np.sum(s[y])), its)


def loss(y: np.ndarray, y_bar: np.ndarray) -> int:
    """Number of cells where two structures differ."""
    y, y_bar = np.asarray(y), np.asarray(y_bar)
    if y.shape != y_bar.shape:
        raise DimMismatch(f"{y.shape} vs {y_bar.shape}")
    return int(np.abs(y.astype(np.int64) - y_bar.astype(np.int64)).sum())


def loss_augmented_scores(s: np.ndarray, y_true: np.ndarray) -> np.ndarray:
    """Scores whose matching objective equals ``s . y_bar + loss(y_true, y_bar) - sum(y_true)``."""
    return np.asarray(s, dtype=np.float64) + 1.0 - 2.0 * np.asarray(y_true, dtype=np.float64)


def loss_augmented_inference(s: np.ndarray, y_true: np.ndarray, spec: FeasibleSetSpec,
                             max_lp_iters: int | None = None) -> MatchResult:
    """Structure maximising ``s . y_bar + loss(y_true, y_bar)``.

    For binary structures the loss is linear in ``y_bar``, so this is a plain
    matching on shifted scores. The returned objective includes the constant
    ``sum(y_true)``.
    """
    y_true = np.asarray(y_true)
    if y_true.shape != np.shape(s):
        raise DimMismatch(f"truth {y_true.shape} vs scores {np.shape(s)}")
    res = solve_matching(loss_augmented_scores(s, y_true), spec, max_lp_iters)
    return MatchResult(res.y, res.fractional, res.objective + float(y_true.sum()), res.iterations)


@dataclass(frozen=True)
class Ranking:
    rank: int
    selections: list[np.ndarray]  # per probe, galleries ordered by (fractional, score) desc
    result: MatchResult


def rank_galleries(s: np.ndarray, r: int, max_lp_iters: int | None = None) -> Ranking:
    """Rank-r selection per probe: the structured matching with every ``r_i = r``.

    Exact mode saturates so each probe receives ``min(r, N2)`` galleries even
    when scores are negative.
    """
    s = np.asarray(s, dtype=np.float64)
    if r < 1:
        raise ValueError("rank must be >= 1")
    n1, n2 = s.shape
    spec = FeasibleSetSpec.uniform(min(r, n2) if n2 else r, n1, n2)
    res = solve_matching(s, spec, max_lp_iters, saturate=True)
    selections = []
    for i in range(n1):
        sel = res.selected(i)
        order = np.lexsort((sel, -s[i, sel], -res.fractional[i, sel]))
        selections.append(sel[order])
    return Ranking(r, selections, res)


def independent_selections(s: np.ndarray, r: int) -> list[np.ndarray]:
    """Per-probe top-r galleries by score alone, ignoring every other probe."""
    s = np.asarray(s, dtype=np.float64)
    out = []
    for row in s:
        order = np.lexsort((np.arange(row.size), -row))
        out.append(order[:r])
    return out
