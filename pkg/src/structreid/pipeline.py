"""Train/test pipeline stages with content-addressed artifact caches.

Cache entries are keyed by a SHA-256 over everything that determines them
(input file bytes, codebook, configuration), so a changed input simply
misses the cache instead of reading a stale entry. Writes go through a
temp-file-and-rename, so an interrupted run never leaves a torn file.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .codebook import Codebook, encode_image, read_codebook, sample_features, train_codebook, write_codebook
from .config import PipelineConfig
from .cooccur import DescriptorSet, pairwise_descriptors, read_descriptor, write_descriptor
from .errors import ParseError
from .ingest import BaselineExtractor, DatasetManifest, features_for_path
from .spatial import ActivationMap, activation_map, read_activation_map, write_activation_map

log = logging.getLogger(__name__)

VIEWS = (1, 2)


def codebook_path(directory: str | Path, view: int) -> Path:
    return Path(directory) / f"codebook_view{view}.prcb"


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()


def codebook_digest(cb: Codebook) -> str:
    return digest(cb.view, hashlib.sha256(cb.centroids.astype("<f4").tobytes()).hexdigest())


@dataclass(frozen=True)
class Cache:
    """Directory of content-addressed artifacts; ``root=None`` disables caching."""

    root: Path | None

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "Cache":
        return cls(Path(cfg.cache_dir) if cfg.cache_dir else None)

    def path(self, kind: str, key: str, suffix: str) -> Path | None:
        if self.root is None:
            return None
        return self.root / kind / key[:2] / f"{key}{suffix}"


# -- codebooks --------------------------------------------------------------

def build_codebooks(manifest: DatasetManifest, cfg: PipelineConfig) -> dict[int, Codebook]:
    """One k-means codebook per view (or one shared by both views)."""
    extractor = BaselineExtractor(cfg.patch, cfg.stride)
    samples = {}
    for view in VIEWS:
        blocks = [features_for_path(p, extractor).vectors
                  for paths in manifest.groups(view).values() for p in paths]
        samples[view] = sample_features(blocks, cfg.sample_size, cfg.seed + view)
    if cfg.share_codebook:
        pooled = np.concatenate([samples[v] for v in VIEWS if samples[v].size], axis=0)
        cb = train_codebook(pooled, cfg.codebook_size, seed=cfg.seed, view=1)
        return {v: Codebook(v, cb.centroids, cb.inertia, cb.n_iter) for v in VIEWS}
    return {v: train_codebook(samples[v], cfg.codebook_size, seed=cfg.seed + v, view=v) for v in VIEWS}


def save_codebooks(codebooks: dict[int, Codebook], directory: str | Path) -> list[Path]:
    Path(directory).mkdir(parents=True, exist_ok=True)
    out = []
    for view, cb in sorted(codebooks.items()):
        write_codebook(codebook_path(directory, view), cb)
        out.append(codebook_path(directory, view))
    return out


def load_codebooks(directory: str | Path) -> dict[int, Codebook]:
    books = {v: read_codebook(codebook_path(directory, v)) for v in VIEWS}
    for v, cb in books.items():
        if cb.view != v:
            raise ParseError(f"{codebook_path(directory, v)} holds a view-{cb.view} codebook")
    return books


# -- activation maps and descriptors ----------------------------------------

@dataclass
class ViewMaps:
    entity_ids: list[str]
    maps: list[ActivationMap]
    keys: list[str]


def entity_maps(manifest: DatasetManifest, view: int, cb: Codebook, cfg: PipelineConfig,
                cache: Cache | None = None) -> ViewMaps:
    """Encode every image of a view and build one activation map per entity."""
    cache = cache or Cache(None)
    extractor = BaselineExtractor(cfg.patch, cfg.stride)
    ks = cfg.kernel_spec
    cb_key = codebook_digest(cb)
    ids, maps, keys = [], [], []
    for eid, paths in manifest.groups(view).items():
        key = digest("pram", cb_key, cfg.patch, cfg.stride, ks.kind.value, ks.sigma, ks.alpha, view, eid,
                     [file_digest(p) for p in paths])
        path = cache.path("maps", key, ".pram")
        if path is not None and path.is_file():
            am = read_activation_map(path)
        else:
            images = []
            for p in paths:
                feats = features_for_path(p, extractor)
                images.append(encode_image(feats.vectors, cb, feats.grid_shape, eid, view))
            am = activation_map(images, ks, eid, view)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                write_activation_map(path, am)
        ids.append(eid)
        maps.append(am)
        keys.append(key)
    return ViewMaps(ids, maps, keys)


def _round_f32(ds: DescriptorSet) -> DescriptorSet:
    # cached descriptors are stored as f32; round fresh ones too so results never depend on the cache
    m = ds.matrix.copy()
    m.data = m.data.astype(np.float32).astype(np.float64)
    m.eliminate_zeros()
    return DescriptorSet(ds.probe_ids, ds.gallery_ids, ds.k1, ds.k2, m)


def descriptor_set(probes: ViewMaps, galleries: ViewMaps, cache: Cache | None = None) -> DescriptorSet:
    """All pair descriptors, read from per-pair cache files when every pair is present."""
    cache = cache or Cache(None)
    n1, n2 = len(probes.maps), len(galleries.maps)
    paths = {(i, j): cache.path("pairs", digest("prco", pk, gk), ".prco")
             for i, pk in enumerate(probes.keys) for j, gk in enumerate(galleries.keys)}
    if cache.root is not None and n1 and n2 and all(p.is_file() for p in paths.values()):
        mapping = {ij: read_descriptor(p) for ij, p in paths.items()}
        return DescriptorSet.from_mapping(mapping, n1, n2, probes.maps[0].n_codewords,
                                          galleries.maps[0].n_codewords, probes.entity_ids,
                                          galleries.entity_ids)
    ds = _round_f32(pairwise_descriptors(probes.maps, galleries.maps))
    if cache.root is not None:
        for (i, j), p in paths.items():
            p.parent.mkdir(parents=True, exist_ok=True)
            write_descriptor(p, ds.descriptor(i, j))
    return ds


def truth_from_ids(probe_ids: Sequence[str], gallery_ids: Sequence[str]) -> np.ndarray:
    index = {g: j for j, g in enumerate(gallery_ids)}
    y = np.zeros((len(probe_ids), len(gallery_ids)), dtype=np.int8)
    for i, p in enumerate(probe_ids):
        if p in index:
            y[i, index[p]] = 1
    return y
