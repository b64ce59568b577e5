"""Dataset manifests, PGM/PPM decoding and dense patch features.

The baseline patch descriptor is deliberately simple: per-channel mean and
variance of the patch followed by an 8-bin, magnitude-weighted histogram of
gradient orientations of the intensity channel. Any callable that maps a
:class:`RasterImage` to :class:`PatchFeatures` can stand in for it, and
pre-extracted ``PRFT`` feature files are accepted wherever an image path is.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._binio import Reader, atomic_write
from .errors import MissingFile, ParseError, PatchTooLarge, ResolutionMismatch

N_ORIENT_BINS = 8
FEATURE_MAGIC = b"PRFT"


@dataclass(frozen=True)
class RasterImage:
    """8-bit image stored as a ``(height, width, channels)`` uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, 1|3) pixels, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"expected uint8 pixels, got {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be non-empty")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class PatchFeature:
    location: tuple[int, int]
    vector: np.ndarray


@dataclass(frozen=True)
class PatchFeatures:
    """All patch features of one image, laid out on the patch-center grid.

    ``vectors[k]`` belongs to ``locations[k]``; rows are in row-major grid
    order so ``vectors.reshape(*grid_shape, -1)`` recovers the grid.
    """

    vectors: np.ndarray
    locations: np.ndarray
    grid_shape: tuple[int, int]

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.locations):
            raise ValueError("vectors/locations length mismatch")
        if len(self.vectors) != self.grid_shape[0] * self.grid_shape[1]:
            raise ValueError("feature count does not fill the grid")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("non-finite feature values")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.vectors)

    def __iter__(self) -> Iterator[PatchFeature]:
        for loc, vec in zip(self.locations, self.vectors):
            yield PatchFeature((int(loc[0]), int(loc[1])), vec)


FeatureExtractor = Callable[[RasterImage], PatchFeatures]


# -- images -----------------------------------------------------------------

def _pnm_header(fh) -> tuple[bytes, int, int, int]:
    tokens: list[bytes] = []
    while len(tokens) < 4:
        line = fh.readline()
        if not line:
            raise ParseError("truncated PNM header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    if len(tokens) != 4:
        raise ParseError("unexpected tokens in PNM header")
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported image format {magic!r}; only binary P5/P6")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ParseError("non-integer PNM header field") from exc
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise ParseError(f"unsupported PNM geometry {w}x{h} maxval={maxval}")
    return magic, w, h, maxval


def read_image_size(path: str | Path) -> tuple[int, int]:
    """(width, height) from the header only."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such image: {path}")
    if path.suffix.lower() == ".prft":
        feats = read_features(path)
        return feats.grid_shape[1], feats.grid_shape[0]
    with open(path, "rb") as fh:
        _, w, h, _ = _pnm_header(fh)
    return w, h


def read_pnm(path: str | Path) -> RasterImage:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such image: {path}")
    with open(path, "rb") as fh:
        magic, w, h, _ = _pnm_header(fh)
        c = 1 if magic == b"P5" else 3
        raw = fh.read(w * h * c)
    if len(raw) != w * h * c:
        raise ParseError(f"{path}: expected {w * h * c} pixel bytes, got {len(raw)}")
    return RasterImage(np.frombuffer(raw, dtype=np.uint8).reshape(h, w, c).copy())


def write_pnm(path: str | Path, img: RasterImage) -> None:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    atomic_write(path, header + img.pixels.tobytes())


# -- manifest ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    entity_id: str
    view: int
    path: Path


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    sizes: dict[int, tuple[int, int]] = field(default_factory=dict)

    def groups(self, view: int) -> dict[str, list[Path]]:
        """entity_id -> image paths for one view, in file order."""
        out: dict[str, list[Path]] = {}
        for e in self.entries:
            if e.view == view:
                out.setdefault(e.entity_id, []).append(e.path)
        return out

    def entity_ids(self, view: int) -> list[str]:
        return list(self.groups(view))


def load_manifest(path: str | Path, check_images: bool = True) -> DatasetManifest:
    """Parse a tab-separated ``entity_id<TAB>view<TAB>path`` manifest.

    Relative image paths resolve against the manifest's directory. Blank
    lines and ``#`` comments are skipped. With ``check_images`` every image
    header is read to enforce one resolution per view.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such manifest: {path}")
    entries = []
    text = path.read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) != 3 or not parts[0] or not parts[2]:
            raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
        if parts[1] not in ("1", "2"):
            raise ParseError(f"{path}:{lineno}: view must be 1 or 2, got {parts[1]!r}")
        img_path = Path(parts[2])
        if not img_path.is_absolute():
            img_path = path.parent / img_path
        entries.append(ManifestEntry(parts[0], int(parts[1]), img_path))

    manifest = DatasetManifest(entries)
    if check_images:
        for e in entries:
            size = read_image_size(e.path)
            seen = manifest.sizes.setdefault(e.view, size)
            if seen != size:
                raise ResolutionMismatch(
                    f"view {e.view}: {e.path} is {size[0]}x{size[1]}, "
                    f"others are {seen[0]}x{seen[1]}")
    return manifest


# -- features ---------------------------------------------------------------

def patch_grid_shape(height: int, width: int, patch_size: int, stride: int) -> tuple[int, int]:
    return ((height - patch_size) // stride + 1, (width - patch_size) // stride + 1)


def orientation_bins(gy: np.ndarray, gx: np.ndarray) -> np.ndarray:
    """Bin index in [0, 8); bin 0 is centered on angle 0 (gradient pointing +x)."""
    angle = np.arctan2(gy, gx)
    width = 2 * np.pi / N_ORIENT_BINS
    return np.floor((angle + width / 2) / width).astype(np.int64) % N_ORIENT_BINS


def extract_patch_features(img: RasterImage, patch_size: int = 5, stride: int = 1) -> PatchFeatures:
    """Baseline dense descriptor on the stride grid of patch centers.

    Layout per patch: ``[mean_c, var_c for each channel] + hist[8]``. Means
    and variances are computed in exact integer arithmetic and scaled to the
    [0, 1] intensity range, so a constant patch has variance exactly 0.
    """
    if patch_size < 1 or patch_size % 2 == 0:
        raise ValueError(f"patch_size must be odd and positive, got {patch_size}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    h, w, c = img.pixels.shape
    if patch_size > min(h, w):
        raise PatchTooLarge(f"patch {patch_size} does not fit a {w}x{h} image")

    n = patch_size * patch_size
    px = img.pixels.astype(np.int64)
    win = (patch_size, patch_size)
    cols = []
    for ch in range(c):
        windows = sliding_window_view(px[:, :, ch], win)[::stride, ::stride]
        s1 = windows.sum(axis=(-2, -1))
        s2 = (windows * windows).sum(axis=(-2, -1))
        cols.append(s1 / (n * 255.0))
        cols.append((n * s2 - s1 * s1) / (n * n * 255.0 ** 2))

    intensity = px.sum(axis=2).astype(np.float64) / (c * 255.0)
    gy, gx = np.gradient(intensity)
    mag = np.hypot(gx, gy)
    bins = orientation_bins(gy, gx)
    for b in range(N_ORIENT_BINS):
        m = np.where(bins == b, mag, 0.0)
        windows = sliding_window_view(m, win)[::stride, ::stride]
        cols.append(windows.sum(axis=(-2, -1)) / n)

    gh, gw = cols[0].shape
    vectors = np.stack([col.ravel() for col in cols], axis=1)
    half = patch_size // 2
    rr, cc = np.meshgrid(np.arange(gh) * stride + half, np.arange(gw) * stride + half, indexing="ij")
    locations = np.stack([rr.ravel(), cc.ravel()], axis=1)
    return PatchFeatures(vectors, locations, (gh, gw))


@dataclass(frozen=True)
class BaselineExtractor:
    patch_size: int = 5
    stride: int = 1

    def __call__(self, img: RasterImage) -> PatchFeatures:
        return extract_patch_features(img, self.patch_size, self.stride)


def features_for_path(path: str | Path, extractor: FeatureExtractor) -> PatchFeatures:
    """Pre-extracted ``.prft`` files are loaded as-is; anything else is decoded and extracted."""
    path = Path(path)
    if path.suffix.lower() == ".prft":
        return read_features(path)
    return extractor(read_pnm(path))


def write_features(path: str | Path, feats: PatchFeatures) -> None:
    count, dim = feats.vectors.shape
    locs = np.asarray(feats.locations)
    if locs.size and (locs.min() < 0 or locs.max() > 0xFFFF):
        raise ValueError("patch centers must fit in u16")
    payload = [
        FEATURE_MAGIC,
        struct.pack("<II", count, dim),
        feats.vectors.astype("<f4").tobytes(),
        locs.astype("<u2").tobytes(),
    ]
    atomic_write(path, b"".join(payload))


def read_features(path: str | Path) -> PatchFeatures:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such feature file: {path}")
    rd = Reader(path.read_bytes(), str(path))
    rd.magic(FEATURE_MAGIC)
    count, dim = rd.unpack("II")
    vectors = np.frombuffer(rd.take(4 * count * dim), dtype="<f4").reshape(count, dim)
    locations = np.frombuffer(rd.take(4 * count), dtype="<u2").reshape(count, 2).astype(np.int64)
    rd.done()
    rows = np.unique(locations[:, 0])
    cols = np.unique(locations[:, 1])
    if len(rows) * len(cols) != count:
        raise ParseError(f"{path}: patch centers do not form a full grid")
    order = np.lexsort((locations[:, 1], locations[:, 0]))
    return PatchFeatures(vectors[order].astype(np.float64), locations[order], (len(rows), len(cols)))
