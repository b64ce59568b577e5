"""Pipeline configuration: defaults, flat key=value files and value parsing."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError
from .spatial import KernelKind, KernelSpec


def parse_lp_mode(text: str) -> int | None:
    """``exact`` -> None, ``capped:N`` -> N (the LP iteration budget)."""
    text = text.strip()
    if text == "exact":
        return None
    head, _, n = text.partition(":")
    if head == "capped" and n.isdigit() and int(n) > 0:
        return int(n)
    raise ValueError(f"lp mode must be 'exact' or 'capped:N' with N > 0, got {text!r}")


def parse_ranks(text: str) -> tuple[int, ...]:
    ranks = tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    if not ranks or min(ranks) < 1:
        raise ValueError(f"ranks must be a comma list of positive integers, got {text!r}")
    return ranks


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


@dataclass(frozen=True)
class PipelineConfig:
    codebook_size: int = 500
    kernel: str = "box"
    sigma: float = 3.0
    alpha: float | None = None
    patch: int = 5
    stride: int = 1
    C: float = 10.0
    r: int = 1
    ranks: tuple[int, ...] = (1, 5, 10, 20)
    seed: int = 0
    max_planes: int = 200
    lp: str = "exact"
    cache_dir: str | None = None
    trials: int = 3
    sample_size: int = 30_000
    share_codebook: bool = False
    violation_tol: float = 1e-3
    scale: int = 40

    def __post_init__(self):
        if self.codebook_size < 1:
            raise ValueError("codebook_size must be >= 1")
        if self.patch < 1 or self.patch % 2 == 0:
            raise ValueError("patch must be odd and positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.C < 0:
            raise ValueError("C must be >= 0")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.max_planes < 0 or self.trials < 0 or self.scale < 0 or self.sample_size < 1:
            raise ValueError("counts must be non-negative")
        parse_lp_mode(self.lp)
        self.kernel_spec  # validates kind, sigma and alpha

    @property
    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(KernelKind(self.kernel), self.sigma, self.alpha)

    @property
    def max_lp_iters(self) -> int | None:
        return parse_lp_mode(self.lp)


# converters for values that arrive as text (config files and CLI flags)
CONVERTERS = {
    "codebook_size": int,
    "kernel": str,
    "sigma": float,
    "alpha": _parse_optional_float,
    "patch": int,
    "stride": int,
    "C": float,
    "r": int,
    "ranks": parse_ranks,
    "seed": int,
    "max_planes": int,
    "lp": lambda t: (parse_lp_mode(t), t.strip())[1],
    "cache_dir": str,
    "trials": int,
    "sample_size": int,
    "share_codebook": _parse_bool,
    "violation_tol": float,
    "scale": int,
}
assert set(CONVERTERS) == {f.name for f in dataclasses.fields(PipelineConfig)}


def _canonical_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    return key if key == "C" else key.lower()


def read_config_file(path: str | Path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, keys may use dashes."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = _canonical_key(key)
        if not sep or key not in CONVERTERS:
            raise ParseError(f"{path}:{lineno}: expected 'key = value' with a known key, got {raw!r}")
        try:
            out[key] = CONVERTERS[key](value.strip())
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return out


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then config-file values, then explicit overrides (e.g. CLI flags)."""
    values = dict(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return PipelineConfig(**values)
