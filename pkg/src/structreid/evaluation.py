"""CMC curves, matching accuracy, robust re-id protocols and timing benchmarks."""
from __future__ import annotations

import csv
import io
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .codebook import CodewordImage
from .cooccur import ModelWeights, similarity_matrix
from .errors import DimMismatch
from .matcher import FeasibleSetSpec, independent_selections, rank_galleries, solve_matching
from .spatial import KernelSpec, activation_map, write_activation_map


@dataclass(frozen=True)
class CmcCurve:
    ranks: np.ndarray
    rates: np.ndarray

    def rate(self, r: int) -> float:
        hit = np.flatnonzero(self.ranks == r)
        if not hit.size:
            raise KeyError(f"rank {r} not evaluated")
        return float(self.rates[hit[0]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "rate"])
        for r, v in zip(self.ranks, self.rates):
            w.writerow([int(r), f"{v:.6f}"])
        return buf.getvalue()


def _true_gallery(truth: np.ndarray) -> np.ndarray:
    truth = np.asarray(truth)
    if truth.ndim != 2:
        raise DimMismatch("truth must be an N1 x N2 matrix")
    if np.any(truth.sum(axis=1) > 1):
        raise ValueError("each probe may have at most one true gallery")
    out = np.where(truth.any(axis=1), truth.argmax(axis=1), -1)
    return out


def cmc(selections: Mapping[int, Sequence[np.ndarray]], truth: np.ndarray) -> CmcCurve:
    """Fraction of matched probes whose true gallery is selected at rank r or better.

    ``selections[r][i]`` are the galleries chosen for probe i at rank r. A
    probe counts at rank r if its true gallery appears in any selection at a
    rank <= r, so the curve is non-decreasing even when structured
    selections at consecutive ranks are not nested. Probes without a true
    gallery are left out of the denominator.
    """
    true_j = _true_gallery(truth)
    matched = true_j >= 0
    ranks = np.array(sorted(selections), dtype=np.int64)
    hit = np.zeros(len(true_j), dtype=bool)
    rates = []
    for r in ranks:
        sel = selections[int(r)]
        if len(sel) != len(true_j):
            raise DimMismatch(f"rank {r}: {len(sel)} selections for {len(true_j)} probes")
        for i, chosen in enumerate(sel):
            if matched[i] and not hit[i]:
                hit[i] = bool(np.isin(true_j[i], chosen))
        rates.append(hit[matched].mean() if matched.any() else 0.0)
    return CmcCurve(ranks, np.array(rates, dtype=np.float64))


def structured_cmc(s: np.ndarray, truth: np.ndarray, ranks: Sequence[int] | None = None,
                   max_lp_iters: int | None = None) -> CmcCurve:
    """CMC where the rank-r selection comes from the structured matching with every r_i = r."""
    n2 = np.shape(s)[1]
    ranks = range(1, n2 + 1) if ranks is None else ranks
    return cmc({r: rank_galleries(s, r, max_lp_iters).selections for r in ranks}, truth)


def independent_cmc(s: np.ndarray, truth: np.ndarray, ranks: Sequence[int] | None = None) -> CmcCurve:
    """CMC of plain per-probe ranking by score."""
    n2 = np.shape(s)[1]
    ranks = range(1, n2 + 1) if ranks is None else ranks
    return cmc({r: independent_selections(s, r) for r in ranks}, truth)


def matching_accuracy(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Share of probes whose predicted gallery set equals their true one (empty for no match)."""
    predicted, truth = np.asarray(predicted) != 0, np.asarray(truth) != 0
    if predicted.shape != truth.shape:
        raise DimMismatch(f"{predicted.shape} vs {truth.shape}")
    if predicted.shape[0] == 0:
        return 1.0
    return float(np.all(predicted == truth, axis=1).mean())


def structured_prediction(s: np.ndarray, r: int = 1, max_lp_iters: int | None = None) -> np.ndarray:
    """Open-set prediction: structured matching that may leave probes unmatched."""
    n1, n2 = np.shape(s)
    return solve_matching(s, FeasibleSetSpec.uniform(r, n1, n2), max_lp_iters).y


def independent_prediction(s: np.ndarray) -> np.ndarray:
    """Each probe takes its best-scoring gallery when that score is positive."""
    s = np.asarray(s, dtype=np.float64)
    y = np.zeros(s.shape, dtype=np.int8)
    if s.size:
        best = s.argmax(axis=1)
        keep = s[np.arange(len(s)), best] > 0
        y[np.flatnonzero(keep), best[keep]] = 1
    return y


def robust_indices(n_probes: int, n_matched: int, n_galleries: int, n_available: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Pick probe and gallery entity indices out of ``n_available`` shared entities.

    ``n_matched`` of the probes have their match among the galleries; the
    remaining galleries are entities that are not probes.
    """
    n_distract = n_galleries - n_matched
    if n_matched > n_probes or n_distract < 0 or n_probes + n_distract > n_available:
        raise ValueError("robust split does not fit the available entities")
    perm = rng.permutation(n_available)
    probes = np.sort(perm[:n_probes])
    matched = rng.choice(probes, size=n_matched, replace=False)
    galleries = np.sort(np.concatenate([matched, perm[n_probes:n_probes + n_distract]]))
    return probes, galleries


# -- benchmarks -------------------------------------------------------------

@dataclass(frozen=True)
class BenchResult:
    storage_kb: float
    t_descriptor_ms: float
    t_similarity_ms: float
    t_matching_s: float

    HEADER = ("S_t_kb", "T1_ms", "T2_ms", "T3_s")

    def row(self) -> tuple[str, ...]:
        return (f"{self.storage_kb:.3f}", f"{self.t_descriptor_ms:.3f}",
                f"{self.t_similarity_ms:.3f}", f"{self.t_matching_s:.4f}")


def _timed(fn: Callable, repeats: int = 1):
    best, out = np.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return out, best


def _pram_bytes(am) -> int:
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "a.pram"
        write_activation_map(path, am)
        return path.stat().st_size


def bench_stage(stage: str, repeats: int = 1, **inputs) -> tuple[float, object]:
    """Run one registered stage; returns (best wall seconds over ``repeats``, output)."""
    if stage not in STAGES:
        raise KeyError(f"unknown stage {stage!r}; known: {sorted(STAGES)}")
    out, secs = _timed(lambda: STAGES[stage](**inputs), repeats)
    return secs, out


def _stage_descriptors(entities: Sequence[Sequence[CodewordImage]], kernel: KernelSpec):
    return [activation_map(list(imgs), kernel) for imgs in entities]


def _stage_similarity(weights: ModelWeights, probes, galleries):
    return similarity_matrix(weights, probes, galleries)


def _stage_matching(scores: np.ndarray, r: int = 1, max_lp_iters: int | None = None):
    n1, n2 = scores.shape
    return solve_matching(scores, FeasibleSetSpec.uniform(r, n1, n2), max_lp_iters)


STAGES: dict[str, Callable] = {
    "descriptor": _stage_descriptors,
    "similarity": _stage_similarity,
    "matching": _stage_matching,
}


def bench(probes: Sequence[Sequence[CodewordImage]], galleries: Sequence[Sequence[CodewordImage]],
          weights: ModelWeights, kernel: KernelSpec, r: int = 1, max_lp_iters: int | None = None,
          repeats: int = 1) -> BenchResult:
    """Storage and timing of the test-time pipeline.

    T1 is the mean time to build one entity's activation map, T2 the time
    for the full probe x gallery similarity matrix, T3 the structured
    matching time, and S_t the mean size of one stored activation map.
    """
    entities = list(probes) + list(galleries)
    if not entities:
        return BenchResult(0.0, 0.0, 0.0, 0.0)
    maps, t1 = _timed(lambda: _stage_descriptors(entities, kernel), repeats)
    pmaps, gmaps = maps[:len(probes)], maps[len(probes):]
    scores, t2 = _timed(lambda: _stage_similarity(weights, pmaps, gmaps), repeats)
    if scores.size:
        _, t3 = _timed(lambda: _stage_matching(scores, r, max_lp_iters), repeats)
    else:
        t3 = 0.0
    storage = np.mean([_pram_bytes(m) for m in maps]) / 1024.0
    return BenchResult(float(storage), 1000.0 * t1 / len(entities), 1000.0 * t2, t3)
