"""Synthetic codeword-image datasets with a planted cross-view codeword mapping.

Each entity owns a layout of codewords on the grid: horizontal bands (think
head / torso / legs) plus one rectangular patch. View 1 shows the layout
as-is. View 2 maps every codeword through a fixed permutation (the same
colour rendered differently by another camera), shifts the layout by up to
``jitter`` cells and replaces a ``noise`` fraction of cells with a different
random codeword.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codebook import CodewordImage
from .ingest import RasterImage, write_pnm


@dataclass(frozen=True)
class SyntheticSpec:
    n_entities: int = 40
    n_test: int | None = None
    images_per_entity: tuple[int, int] = (1, 1)
    grid: tuple[int, int] = (24, 12)
    n_codewords: int = 16
    permutation: tuple[int, ...] | None = None
    noise: float = 0.1
    jitter: int = 2
    bands: tuple[int, int] = (3, 5)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.noise < 1:
            raise ValueError("noise rate must lie in [0, 1)")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if self.n_codewords < 2:
            raise ValueError("need at least two codewords")
        if self.permutation is not None and sorted(self.permutation) != list(range(self.n_codewords)):
            raise ValueError("permutation must be a permutation of range(n_codewords)")
        if isinstance(self.images_per_entity, int):
            object.__setattr__(self, "images_per_entity", (self.images_per_entity,) * 2)

    def planted_permutation(self) -> np.ndarray:
        if self.permutation is not None:
            return np.array(self.permutation)
        return np.random.default_rng([self.seed, 0xC0DE]).permutation(self.n_codewords)


@dataclass
class Split:
    """Probe (view 1) and gallery (view 2) entities with the true pairing."""

    probe_ids: list[str]
    gallery_ids: list[str]
    probes: list[list[CodewordImage]]
    galleries: list[list[CodewordImage]]
    truth: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.truth is None:
            index = {g: j for j, g in enumerate(self.gallery_ids)}
            t = np.zeros((len(self.probe_ids), len(self.gallery_ids)), dtype=np.int8)
            for i, p in enumerate(self.probe_ids):
                if p in index:
                    t[i, index[p]] = 1
            self.truth = t

    def subset(self, probe_idx, gallery_idx) -> "Split":
        probe_idx, gallery_idx = list(probe_idx), list(gallery_idx)
        return Split([self.probe_ids[i] for i in probe_idx], [self.gallery_ids[j] for j in gallery_idx],
                     [self.probes[i] for i in probe_idx], [self.galleries[j] for j in gallery_idx])


def _entity_rng(spec: SyntheticSpec, entity_id: str, stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, zlib.crc32(entity_id.encode("utf-8")), stream])


def signature(spec: SyntheticSpec, entity_id: str) -> np.ndarray:
    """The entity's view-1 codeword layout; depends only on (seed, entity_id, grid, K)."""
    rng = _entity_rng(spec, entity_id, 0)
    h, w = spec.grid
    k = spec.n_codewords
    n_bands = int(rng.integers(spec.bands[0], spec.bands[1] + 1))
    n_bands = min(n_bands, h)
    cuts = np.sort(rng.choice(np.arange(1, h), size=n_bands - 1, replace=False)) if n_bands > 1 else []
    edges = np.concatenate([[0], cuts, [h]]).astype(int)
    grid = np.empty((h, w), dtype=np.int64)
    prev = -1
    for a, b in zip(edges[:-1], edges[1:]):
        if prev < 0:
            c = int(rng.integers(k))
        else:
            c = int(rng.integers(k - 1))
            c = c if c < prev else c + 1  # adjacent bands differ
        grid[a:b] = c
        prev = c
    ph = int(rng.integers(max(1, h // 6), max(2, h // 3) + 1))
    pw = int(rng.integers(max(1, w // 4), max(2, w // 2) + 1))
    r0 = int(rng.integers(0, h - ph + 1))
    c0 = int(rng.integers(0, w - pw + 1))
    grid[r0:r0 + ph, c0:c0 + pw] = int(rng.integers(k))
    return grid


def shift(grid: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate by (dy, dx) cells, replicating edge cells into the vacated border."""
    h, w = grid.shape
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return grid[np.ix_(rows, cols)]


def view2_image(spec: SyntheticSpec, entity_id: str, shot: int,
                perm: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(noisy image, noiseless jittered image) for one view-2 shot."""
    perm = spec.planted_permutation() if perm is None else perm
    rng = _entity_rng(spec, entity_id, 1000 + shot)
    dy, dx = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
    clean = shift(perm[signature(spec, entity_id)], int(dy), int(dx))
    flip = rng.random(clean.shape) < spec.noise
    # a flipped cell always takes a codeword different from the clean one
    offset = rng.integers(1, spec.n_codewords, size=clean.shape)
    noisy = np.where(flip, (clean + offset) % spec.n_codewords, clean)
    return noisy, clean


def _entity(spec: SyntheticSpec, entity_id: str, perm: np.ndarray):
    sig = signature(spec, entity_id)
    k = spec.n_codewords
    v1 = [CodewordImage(sig.copy(), k, entity_id, 1) for _ in range(spec.images_per_entity[0])]
    v2 = [CodewordImage(view2_image(spec, entity_id, m, perm)[0], k, entity_id, 2)
          for m in range(spec.images_per_entity[1])]
    return v1, v2


def make_split(spec: SyntheticSpec, ids: list[str]) -> Split:
    perm = spec.planted_permutation()
    probes, galleries = [], []
    for eid in ids:
        v1, v2 = _entity(spec, eid, perm)
        probes.append(v1)
        galleries.append(v2)
    return Split(list(ids), list(ids), probes, galleries)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Split, Split]:
    n_test = spec.n_entities if spec.n_test is None else spec.n_test
    train_ids = [f"train-{i:04d}" for i in range(spec.n_entities)]
    test_ids = [f"test-{i:04d}" for i in range(n_test)]
    return make_split(spec, train_ids), make_split(spec, test_ids)


# -- rendering to image files ------------------------------------------------

def palette(n_codewords: int, seed: int = 0) -> np.ndarray:
    """Distinct RGB colours, one per codeword, at least 24 apart in some channel."""
    rng = np.random.default_rng([seed, 0xBEEF])
    levels = np.arange(0, 256, 24)
    grid = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), axis=-1).reshape(-1, 3)
    if n_codewords > len(grid):
        raise ValueError(f"at most {len(grid)} codewords can be rendered")
    return grid[rng.choice(len(grid), size=n_codewords, replace=False)].astype(np.uint8)


def render(grid: np.ndarray, colours: np.ndarray, cell: int) -> RasterImage:
    """Paint each codeword cell as a ``cell x cell`` block of its colour."""
    px = colours[np.asarray(grid)]
    return RasterImage(np.repeat(np.repeat(px, cell, axis=0), cell, axis=1))


def write_dataset(out_dir: str | Path, spec: SyntheticSpec, cell: int = 5) -> dict[str, Path]:
    """Render the train and test splits as PPM files plus one manifest per split.

    With patch size and stride both equal to ``cell`` the patch grid lines up
    with the codeword grid.
    """
    out_dir = Path(out_dir)
    colours = palette(spec.n_codewords, spec.seed)
    manifests = {}
    for name, split in zip(("train", "test"), generate_synthetic(spec)):
        lines = []
        for view, entities in ((1, split.probes), (2, split.galleries)):
            for images in entities:
                for m, ci in enumerate(images):
                    rel = Path(name) / f"{ci.entity_id}_v{view}_{m}.ppm"
                    (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
                    write_pnm(out_dir / rel, render(ci.grid, colours, cell))
                    lines.append(f"{ci.entity_id}\t{view}\t{rel.as_posix()}")
        manifests[name] = out_dir / f"{name}.tsv"
        manifests[name].write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifests
