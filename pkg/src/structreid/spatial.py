"""Spatial kernels, chessboard distance transforms and multi-shot activation maps.

For every codeword ``u`` and grid location ``h`` an entity's activation is the
average, over the entity's images, of the strongest kernel response from any
location where ``u`` occurs. All kernels are non-increasing in distance, so
that maximum equals the kernel applied to the distance transform of the
codeword's support, which is how it is computed here.

Activation values are stored as float32. Kernel values are rounded to
float32 before averaging, which makes the float64 accumulation exact: an
entity made of M copies of one image gets exactly the single-image map.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._binio import Reader, atomic_write, pack_string
from .codebook import CodewordImage
from .errors import DimMismatch, EmptyEntity, MissingFile, ParseError

ACTIVATION_MAGIC = b"PRAM"


class KernelKind(str, enum.Enum):
    TRUNCATED_GAUSSIAN = "tgauss"
    TRUNCATED_LINEAR = "tlinear"
    BOX = "box"


@dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind = KernelKind.BOX
    sigma: float = 3.0
    alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        # a zero-width box is a valid point kernel; the other kinds divide by sigma
        if not (self.sigma > 0 or (self.kind is KernelKind.BOX and self.sigma == 0)):
            raise ValueError(f"sigma must be positive (or 0 for box), got {self.sigma}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", 2.0 * self.sigma)
        if not (0 <= self.alpha < math.inf):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")


def kappa(spec: KernelSpec, d):
    """Kernel response at chessboard distance ``d`` (scalar or array; inf allowed)."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    if spec.kind is KernelKind.TRUNCATED_GAUSSIAN:
        with np.errstate(over="ignore", invalid="ignore"):
            out = np.where(d <= spec.alpha, np.exp(-np.where(np.isinf(d), 0.0, d) / spec.sigma), 0.0)
    elif spec.kind is KernelKind.TRUNCATED_LINEAR:
        out = np.maximum(0.0, 1.0 - d / spec.sigma)
    else:
        out = np.where(d <= spec.sigma, 1.0, 0.0)
    return out if out.ndim else float(out)


def _sweep_rows(d: np.ndarray, rows: Iterable[int], prev_step: int) -> None:
    """One raster pass of the two-pass chessboard transform, in place.

    ``d`` has shape (..., H, W). Each row first takes the three neighbours in
    the previously processed row, then the in-row neighbour on the side the
    pass comes from, which is a running minimum of ``d[k] + |c - k|``.
    """
    w = d.shape[-1]
    idx = np.arange(w, dtype=np.float64)
    for r in rows:
        row = d[..., r, :]
        p = r - prev_step
        if 0 <= p < d.shape[-2]:
            above = d[..., p, :]
            cand = above.copy()
            cand[..., 1:] = np.minimum(cand[..., 1:], above[..., :-1])
            cand[..., :-1] = np.minimum(cand[..., :-1], above[..., 1:])
            np.minimum(row, cand + 1.0, out=row)
        if prev_step > 0:
            np.minimum(row, np.minimum.accumulate(row - idx, axis=-1) + idx, out=row)
        else:
            rev = row[..., ::-1]
            np.minimum(rev, np.minimum.accumulate(rev - idx, axis=-1) + idx, out=rev)


def distance_transform_mask(mask: np.ndarray) -> np.ndarray:
    """Chessboard distance to the nearest True cell; inf where the mask is empty.

    Accepts stacked masks of shape (..., H, W); each trailing 2-D slice is
    transformed independently.
    """
    mask = np.asarray(mask, dtype=bool)
    d = np.where(mask, 0.0, np.inf)
    h = d.shape[-2]
    _sweep_rows(d, range(h), 1)
    _sweep_rows(d, range(h - 1, -1, -1), -1)
    return d


def distance_transform(support: Iterable[tuple[int, int]], dims: tuple[int, int]) -> np.ndarray:
    h, w = dims
    if h < 1 or w < 1:
        raise ValueError("grid dims must be positive")
    mask = np.zeros((h, w), dtype=bool)
    for r, c in support:
        mask[r, c] = True
    return distance_transform_mask(mask)


def codeword_masks(ci: CodewordImage) -> np.ndarray:
    """(K, H, W) boolean stack of codeword slices."""
    return ci.grid[None, :, :] == np.arange(ci.n_codewords)[:, None, None]


@dataclass(frozen=True)
class ActivationMap:
    entity_id: str
    view: int
    values: np.ndarray  # (K, H, W) float32

    @property
    def n_codewords(self) -> int:
        return self.values.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    def flat(self) -> np.ndarray:
        return self.values.reshape(self.values.shape[0], -1)


def activation_map(images: Sequence[CodewordImage], spec: KernelSpec,
                   entity_id: str | None = None, view: int | None = None) -> ActivationMap:
    if not images:
        raise EmptyEntity("entity has no images")
    shape, k = images[0].shape, images[0].n_codewords
    for ci in images[1:]:
        if ci.shape != shape or ci.n_codewords != k:
            raise DimMismatch("images of one entity must share grid shape and codebook size")
    total = np.zeros((k,) + shape, dtype=np.float64)
    for ci in images:
        dt = distance_transform_mask(codeword_masks(ci))
        total += np.asarray(kappa(spec, dt), dtype=np.float32)
    values = (total / len(images)).astype(np.float32)
    return ActivationMap(images[0].entity_id if entity_id is None else entity_id,
                         images[0].view if view is None else view, values)


def write_activation_map(path: str | Path, am: ActivationMap) -> None:
    """PRAM file; the f32 payload is run-length coded as (u32 zeros, u32 n, n x f32) segments."""
    k, h, w = am.values.shape
    flat = am.values.astype("<f4").ravel()
    parts = [ACTIVATION_MAGIC, pack_string(am.entity_id), struct.pack("<BIII", am.view, k, h, w)]
    edges = np.diff(np.concatenate(([0], (flat != 0).astype(np.int8), [0])))
    starts, ends = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    pos = 0
    for start, end in zip(starts, ends):
        parts.append(struct.pack("<II", start - pos, end - start))
        parts.append(flat[start:end].tobytes())
        pos = end
    if pos < flat.size:
        parts.append(struct.pack("<II", flat.size - pos, 0))
    atomic_write(path, b"".join(parts))


def read_activation_map(path: str | Path) -> ActivationMap:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such activation map: {path}")
    rd = Reader(path.read_bytes(), str(path))
    rd.magic(ACTIVATION_MAGIC)
    entity_id = rd.string()
    view, k, h, w = rd.unpack("BIII")
    flat = np.zeros(k * h * w, dtype=np.float32)
    pos = 0
    while pos < flat.size:
        zeros, n = rd.unpack("II")
        pos += zeros
        if pos + n > flat.size:
            raise ParseError(f"{path}: run overflows the map")
        flat[pos:pos + n] = np.frombuffer(rd.take(4 * n), dtype="<f4")
        pos += n
    rd.done()
    return ActivationMap(entity_id, view, flat.reshape(k, h, w))
