"""Per-view visual codebooks and codeword images."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binio import Reader, atomic_write
from .errors import DimensionMismatch, IndexOutOfRange, MissingFile, TooFewSamples

CODEBOOK_MAGIC = b"PRCB"


@dataclass(frozen=True)
class Codebook:
    view: int
    centroids: np.ndarray
    inertia: float = float("nan")
    n_iter: int = 0

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class CodewordImage:
    """Grid of codeword indices, one per patch center."""

    grid: np.ndarray
    n_codewords: int
    entity_id: str = ""
    view: int = 1

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.int64)
        if g.ndim != 2:
            raise ValueError("codeword grid must be 2-D")
        if g.size and (g.min() < 0 or g.max() >= self.n_codewords):
            raise IndexOutOfRange(f"codeword index outside [0, {self.n_codewords})")
        object.__setattr__(self, "grid", g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # Exact per-pair differences; the expanded ||x||^2 - 2xc + ||c||^2 form can
    # flip argmin ties.
    out = np.empty((len(x), len(c)))
    for k in range(len(c)):
        d = x - c[k]
        out[:, k] = np.einsum("ij,ij->i", d, d)
    return out


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    closest = _sq_dists(x, x[idx])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # Remaining points coincide with chosen centers; pick any unchosen one.
            pick = int(rng.choice(np.setdiff1d(np.arange(n), idx)))
        else:
            pick = int(rng.choice(n, p=closest / total))
        idx.append(pick)
        closest = np.minimum(closest, _sq_dists(x, x[pick:pick + 1])[:, 0])
    return x[idx].copy()


@dataclass
class KMeansTrace:
    inertia: list[float] = field(default_factory=list)


def train_codebook(features: np.ndarray, k: int, seed: int = 0, max_iters: int = 100,
                   tol: float = 1e-6, view: int = 1, trace: KMeansTrace | None = None) -> Codebook:
    """Lloyd's k-means with k-means++ seeding.

    Stops after ``max_iters`` iterations or once no centroid moves by
    ``tol`` or more (Euclidean). A cluster that empties is re-seeded with the
    point farthest from its current centroid. ``trace`` (if given) collects
    the objective after each assignment step.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be an (n, D) array")
    if k < 1:
        raise ValueError("k must be positive")
    if len(x) < k:
        raise TooFewSamples(f"{len(x)} samples for {k} codewords")
    if len(np.unique(x, axis=0)) < k:
        raise TooFewSamples(f"fewer than {k} distinct samples")

    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d = _sq_dists(x, centers)
        labels = d.argmin(axis=1)
        best = d[np.arange(len(x)), labels]
        if trace is not None:
            trace.inertia.append(float(best.sum()))
        new = centers.copy()
        counts = np.bincount(labels, minlength=k)
        taken = np.zeros(len(x), dtype=bool)
        for j in range(k):
            if counts[j]:
                new[j] = x[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            far = np.where(taken, -1.0, best)
            p = int(far.argmax())
            taken[p] = True
            new[j] = x[p]
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    # Stored codebooks are f32; round now so a saved codebook encodes identically.
    centers = centers.astype(np.float32).astype(np.float64)
    inertia = float(_sq_dists(x, centers).min(axis=1).sum())
    return Codebook(view, centers, inertia, n_iter)


def encode_image(features: np.ndarray, cb: Codebook, grid_shape: tuple[int, int] | None = None,
                 entity_id: str = "", view: int | None = None) -> CodewordImage:
    """Nearest-centroid quantization; ties go to the lowest centroid index."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cb.dim:
        raise DimensionMismatch(f"features of dim {x.shape[-1]} vs codebook dim {cb.dim}")
    labels = _sq_dists(x, cb.centroids).argmin(axis=1)
    if grid_shape is None:
        grid_shape = (1, len(x))
    return CodewordImage(labels.reshape(grid_shape), cb.size, entity_id,
                         cb.view if view is None else view)


def codeword_support(ci: CodewordImage, u: int) -> set[tuple[int, int]]:
    if not 0 <= u < ci.n_codewords:
        raise IndexOutOfRange(f"codeword {u} outside [0, {ci.n_codewords})")
    return {(int(r), int(c)) for r, c in zip(*np.nonzero(ci.grid == u))}


def sample_features(blocks: list[np.ndarray], n: int, seed: int) -> np.ndarray:
    """Uniformly sample up to ``n`` rows without replacement from stacked feature blocks."""
    x = np.concatenate(blocks, axis=0) if blocks else np.empty((0, 0))
    if len(x) <= n:
        return x
    rng = np.random.default_rng(seed)
    return x[np.sort(rng.choice(len(x), size=n, replace=False))]


def write_codebook(path: str | Path, cb: Codebook) -> None:
    k, d = cb.centroids.shape
    atomic_write(path, CODEBOOK_MAGIC + struct.pack("<BII", cb.view, k, d)
                 + cb.centroids.astype("<f4").tobytes())


def read_codebook(path: str | Path) -> Codebook:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such codebook: {path}")
    rd = Reader(path.read_bytes(), str(path))
    rd.magic(CODEBOOK_MAGIC)
    view, k, d = rd.unpack("BII")
    centroids = np.frombuffer(rd.take(4 * k * d), dtype="<f4").reshape(k, d).astype(np.float64)
    rd.done()
    return Codebook(view, centroids)
