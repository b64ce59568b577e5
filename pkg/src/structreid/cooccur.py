"""Cross-view visual-word co-occurrence descriptors.

The (u, v) entry of a pair descriptor is the grid average of the product of
the probe's activation for codeword u and the gallery's activation for
codeword v. Descriptors and weights are indexed by ``u * K2 + v``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from ._binio import Reader, atomic_write, pack_string
from .errors import DimMismatch, IndexOutOfRange, MissingFile, ParseError
from .spatial import ActivationMap

DESCRIPTOR_MAGIC = b"PRCO"
WEIGHTS_MAGIC = b"PRWT"

# Upper bound on dense floats materialised at once by pairwise_descriptors.
_BLOCK_BUDGET = 1 << 22


@dataclass(frozen=True)
class SparseVector:
    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices/values must be matching 1-D arrays")
        if idx.size and (idx.min() < 0 or idx.max() >= self.dim):
            raise IndexOutOfRange(f"sparse index outside [0, {self.dim})")
        order = np.argsort(idx, kind="stable")
        object.__setattr__(self, "indices", idx[order])
        object.__setattr__(self, "values", val[order])

    @classmethod
    def from_dense(cls, x: np.ndarray) -> "SparseVector":
        x = np.asarray(x, dtype=np.float64).ravel()
        nz = np.flatnonzero(x)
        return cls(x.size, nz, x[nz])

    @property
    def nnz(self) -> int:
        return self.indices.size

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        np.add.at(out, self.indices, self.values)
        return out

    def dot(self, dense: np.ndarray) -> float:
        return float(self.values @ np.asarray(dense)[self.indices])

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.indices.tolist(), self.values.tolist()))


@dataclass(frozen=True)
class CooccurrenceDescriptor(SparseVector):
    k1: int = 0
    k2: int = 0
    probe_id: str = ""
    gallery_id: str = ""

    def entry(self, u: int, v: int) -> float:
        pos = np.searchsorted(self.indices, u * self.k2 + v)
        if pos < self.nnz and self.indices[pos] == u * self.k2 + v:
            return float(self.values[pos])
        return 0.0


@dataclass(frozen=True)
class ModelWeights:
    """Linear co-occurrence weights, kept dense (length K1*K2) in memory."""

    k1: int
    k2: int
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.shape != (self.k1 * self.k2,):
            raise DimMismatch(f"weight vector of shape {v.shape} for K1={self.k1}, K2={self.k2}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite weights")
        object.__setattr__(self, "vector", v)

    @classmethod
    def zeros(cls, k1: int, k2: int) -> "ModelWeights":
        return cls(k1, k2, np.zeros(k1 * k2))

    @property
    def matrix(self) -> np.ndarray:
        return self.vector.reshape(self.k1, self.k2)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.vector))


def pack_index(u, v, k2: int):
    return np.asarray(u, dtype=np.int64) * k2 + np.asarray(v, dtype=np.int64)


def unpack_index(idx, k2: int):
    idx = np.asarray(idx, dtype=np.int64)
    return idx // k2, idx % k2


def cooccurrence(a: ActivationMap, b: ActivationMap) -> CooccurrenceDescriptor:
    if a.grid_shape != b.grid_shape:
        raise DimMismatch(f"grid {a.grid_shape} vs {b.grid_shape}")
    fa, fb = a.flat().astype(np.float64), b.flat().astype(np.float64)
    dense = (fa @ fb.T) / fa.shape[1]
    k1, k2 = dense.shape
    nz = np.flatnonzero(dense)
    return CooccurrenceDescriptor(k1 * k2, nz, dense.ravel()[nz], k1, k2, a.entity_id, b.entity_id)


def aggregate_basis(descriptors: Mapping[tuple[int, int], SparseVector], y: np.ndarray) -> SparseVector:
    """Sum of the descriptors of every selected pair (i, j) with ``y[i, j] == 1``."""
    y = np.asarray(y)
    dims = {d.dim for d in descriptors.values()}
    if len(dims) > 1:
        raise DimMismatch("descriptors disagree on dimension")
    dim = dims.pop() if dims else 0
    for i, j in descriptors:
        if not (0 <= i < y.shape[0] and 0 <= j < y.shape[1]):
            raise IndexOutOfRange(f"descriptor pair {(i, j)} outside y of shape {y.shape}")
    picked = [descriptors[(int(i), int(j))] for i, j in zip(*np.nonzero(y))
              if (int(i), int(j)) in descriptors]
    if not picked:
        return SparseVector(dim, np.empty(0, np.int64), np.empty(0))
    idx = np.concatenate([d.indices for d in picked])
    val = np.concatenate([d.values for d in picked])
    uniq, inv = np.unique(idx, return_inverse=True)
    sums = np.zeros(len(uniq))
    np.add.at(sums, inv, val)
    keep = sums != 0
    return SparseVector(dim, uniq[keep], sums[keep])


def score(w: ModelWeights, d: SparseVector) -> float:
    if d.dim != w.vector.size:
        raise DimMismatch(f"descriptor dim {d.dim} vs weight dim {w.vector.size}")
    return d.dot(w.vector)


@dataclass
class DescriptorSet:
    """All pair descriptors of a probe/gallery split as one sparse matrix.

    Row ``i * n_gallery + j`` holds the descriptor of probe i and gallery j.
    """

    probe_ids: list[str]
    gallery_ids: list[str]
    k1: int
    k2: int
    matrix: sp.csr_matrix

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.probe_ids), len(self.gallery_ids)

    def basis(self, y: np.ndarray) -> np.ndarray:
        """Dense aggregated basis for a (possibly fractional) structure."""
        return np.asarray(self.matrix.T @ np.asarray(y, dtype=np.float64).ravel()).ravel()

    def scores(self, w: ModelWeights) -> np.ndarray:
        return np.asarray(self.matrix @ w.vector).reshape(self.shape)

    def descriptor(self, i: int, j: int) -> CooccurrenceDescriptor:
        row = self.matrix.getrow(i * len(self.gallery_ids) + j)
        return CooccurrenceDescriptor(self.k1 * self.k2, row.indices, row.data, self.k1, self.k2,
                                      self.probe_ids[i], self.gallery_ids[j])

    def as_mapping(self) -> dict[tuple[int, int], CooccurrenceDescriptor]:
        n1, n2 = self.shape
        return {(i, j): self.descriptor(i, j) for i in range(n1) for j in range(n2)}

    @classmethod
    def from_mapping(cls, descriptors: Mapping[tuple[int, int], SparseVector], n1: int, n2: int,
                     k1: int, k2: int, probe_ids: Sequence[str] | None = None,
                     gallery_ids: Sequence[str] | None = None) -> "DescriptorSet":
        """Pairs absent from the mapping become all-zero rows."""
        rows, cols, vals = [], [], []
        for (i, j), d in descriptors.items():
            if not (0 <= i < n1 and 0 <= j < n2):
                raise IndexOutOfRange(f"descriptor pair {(i, j)} outside {n1}x{n2}")
            if d.dim != k1 * k2:
                raise DimMismatch(f"descriptor dim {d.dim} vs {k1}x{k2}")
            rows.append(np.full(d.nnz, i * n2 + j))
            cols.append(d.indices)
            vals.append(d.values)
        if rows:
            m = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(n1 * n2, k1 * k2))
        else:
            m = sp.csr_matrix((n1 * n2, k1 * k2))
        pids = list(probe_ids) if probe_ids is not None else [str(i) for i in range(n1)]
        gids = list(gallery_ids) if gallery_ids is not None else [str(j) for j in range(n2)]
        return cls(pids, gids, k1, k2, m)


def _stack(maps: Sequence[ActivationMap]) -> np.ndarray:
    shapes = {(m.n_codewords,) + tuple(m.grid_shape) for m in maps}
    if len(shapes) > 1:
        raise DimMismatch("activation maps of one view must share codebook size and grid")
    return np.stack([m.flat().astype(np.float64) for m in maps])


def pairwise_descriptors(probes: Sequence[ActivationMap], galleries: Sequence[ActivationMap]) -> DescriptorSet:
    """Descriptors for every probe/gallery pair, batched over galleries."""
    pids = [m.entity_id for m in probes]
    gids = [m.entity_id for m in galleries]
    if not probes or not galleries:
        k1 = probes[0].n_codewords if probes else 0
        k2 = galleries[0].n_codewords if galleries else 0
        return DescriptorSet(pids, gids, k1, k2, sp.csr_matrix((len(pids) * len(gids), k1 * k2)))
    a, b = _stack(probes), _stack(galleries)
    if a.shape[2] != b.shape[2]:
        raise DimMismatch("probe and gallery grids differ")
    n1, k1, npix = a.shape
    n2, k2, _ = b.shape
    chunk = max(1, _BLOCK_BUDGET // max(1, k1 * k2))
    blocks = []
    bflat = b.reshape(n2 * k2, npix)
    for i in range(n1):
        for j0 in range(0, n2, chunk):
            j1 = min(n2, j0 + chunk)
            prod = (a[i] @ bflat[j0 * k2:j1 * k2].T) / npix
            dense = prod.reshape(k1, j1 - j0, k2).transpose(1, 0, 2).reshape(j1 - j0, k1 * k2)
            blocks.append(sp.csr_matrix(dense))
    return DescriptorSet(pids, gids, k1, k2, sp.vstack(blocks, format="csr"))


def similarity_matrix(w: ModelWeights, probes: Sequence[ActivationMap],
                      galleries: Sequence[ActivationMap]) -> np.ndarray:
    """``w . phi(i, j)`` for all pairs without materialising descriptors.

    Uses ``sum_h a_i(h)^T W b_j(h) / |grid|``: each probe map is projected
    through W once, then every pair costs one K2 x |grid| inner product.
    """
    n1, n2 = len(probes), len(galleries)
    if not n1 or not n2:
        return np.zeros((n1, n2))
    a, b = _stack(probes), _stack(galleries)
    if a.shape[1] != w.k1 or b.shape[1] != w.k2:
        raise DimMismatch("activation maps do not match the weight dimensions")
    npix = a.shape[2]
    proj = np.einsum("uv,iup->ivp", w.matrix, a)
    return np.einsum("ivp,jvp->ij", proj, b) / npix


def write_descriptor(path: str | Path, d: CooccurrenceDescriptor) -> None:
    parts = [DESCRIPTOR_MAGIC, pack_string(d.probe_id), pack_string(d.gallery_id),
             struct.pack("<III", d.k1, d.k2, d.nnz)]
    rec = np.empty(d.nnz, dtype=[("idx", "<u8"), ("val", "<f4")])
    rec["idx"], rec["val"] = d.indices, d.values
    parts.append(rec.tobytes())
    atomic_write(path, b"".join(parts))


def read_descriptor(path: str | Path) -> CooccurrenceDescriptor:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such descriptor: {path}")
    rd = Reader(path.read_bytes(), str(path))
    rd.magic(DESCRIPTOR_MAGIC)
    pid, gid = rd.string(), rd.string()
    k1, k2, nnz = rd.unpack("III")
    rec = np.frombuffer(rd.take(12 * nnz), dtype=[("idx", "<u8"), ("val", "<f4")])
    rd.done()
    if nnz and int(rec["idx"].max()) >= k1 * k2:
        raise ParseError(f"{path}: index outside {k1}x{k2}")
    return CooccurrenceDescriptor(k1 * k2, rec["idx"].astype(np.int64), rec["val"].astype(np.float64),
                                  k1, k2, pid, gid)


def write_weights(path: str | Path, w: ModelWeights) -> None:
    nz = np.flatnonzero(w.vector)
    rec = np.empty(nz.size, dtype=[("idx", "<u8"), ("val", "<f4")])
    rec["idx"], rec["val"] = nz, w.vector[nz]
    atomic_write(path, WEIGHTS_MAGIC + struct.pack("<III", w.k1, w.k2, nz.size) + rec.tobytes())


def read_weights(path: str | Path) -> ModelWeights:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such weights file: {path}")
    rd = Reader(path.read_bytes(), str(path))
    rd.magic(WEIGHTS_MAGIC)
    k1, k2, nnz = rd.unpack("III")
    rec = np.frombuffer(rd.take(12 * nnz), dtype=[("idx", "<u8"), ("val", "<f4")])
    rd.done()
    vec = np.zeros(k1 * k2)
    idx = rec["idx"].astype(np.int64)
    if nnz and idx.max() >= k1 * k2:
        raise ParseError(f"{path}: index outside {k1}x{k2}")
    vec[idx] = rec["val"]
    return ModelWeights(k1, k2, vec)
