"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import CONVERTERS, PipelineConfig, build_config, read_config_file
from .cooccur import ModelWeights, read_weights, similarity_matrix, write_weights
from .errors import DataError, NumericError
from .evaluation import (BenchResult, bench, independent_prediction, matching_accuracy,
                         structured_cmc, structured_prediction)
from .ingest import load_manifest
from .learner import TrainConfig, train
from .matcher import rank_galleries
from .synthetic import SyntheticSpec, generate_synthetic, write_dataset
from ._binio import atomic_write

log = logging.getLogger("structreid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _text_csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, text.encode("utf-8"))


# -- commands ---------------------------------------------------------------

def cmd_build_codebook(args, cfg: PipelineConfig) -> int:
    manifest = load_manifest(args.manifest)
    books = pipeline.build_codebooks(manifest, cfg)
    pipeline.save_codebooks(books, args.out_dir)
    for view, cb in sorted(books.items()):
        print(f"view {view}: K={cb.size} D={cb.dim} inertia={cb.inertia:.6g} iters={cb.n_iter}")
    return EXIT_OK


def _view_maps(args, cfg):
    manifest = load_manifest(args.manifest)
    books = pipeline.load_codebooks(args.codebooks)
    cache = pipeline.Cache.from_config(cfg)
    probes = pipeline.entity_maps(manifest, 1, books[1], cfg, cache)
    galleries = pipeline.entity_maps(manifest, 2, books[2], cfg, cache)
    return books, cache, probes, galleries


def cmd_train(args, cfg: PipelineConfig) -> int:
    _, cache, probes, galleries = _view_maps(args, cfg)
    ds = pipeline.descriptor_set(probes, galleries, cache)
    truth = pipeline.truth_from_ids(probes.entity_ids, galleries.entity_ids)
    tc = TrainConfig(C=cfg.C, max_planes=cfg.max_planes, violation_tol=cfg.violation_tol, seed=cfg.seed)
    res = train(ds, truth, tc)
    write_weights(args.out, res.weights)
    print(f"planes={res.n_planes} converged={int(res.converged)} violation={res.violation:.6g} "
          f"xi={res.xi:.6g} nnz={res.weights.nnz}")
    if not res.converged:
        log.warning("stopped at %d planes before reaching violation tolerance %g", res.n_planes,
                    cfg.violation_tol)
    return EXIT_OK


def cmd_match(args, cfg: PipelineConfig) -> int:
    books, _, probes, galleries = _view_maps(args, cfg)
    weights = read_weights(args.weights)
    if (weights.k1, weights.k2) != (books[1].size, books[2].size):
        raise DataError(f"weights are {weights.k1}x{weights.k2} but codebooks have "
                        f"{books[1].size} and {books[2].size} codewords")
    s = similarity_matrix(weights, probes.maps, galleries.maps)
    if s.size == 0:
        s = np.zeros((len(probes.maps), len(galleries.maps)))
    truth = pipeline.truth_from_ids(probes.entity_ids, galleries.entity_ids)
    out = Path(args.out_dir)
    n2 = s.shape[1]
    lp_iters = cfg.max_lp_iters

    for r in cfg.ranks:
        rows = []
        if s.size:
            y = rank_galleries(s, r, lp_iters).result.y
            for i, pid in enumerate(probes.entity_ids):
                for j, gid in enumerate(galleries.entity_ids):
                    rows.append([pid, gid, f"{s[i, j]:.9g}", int(y[i, j])])
        _write_text(out / f"matches_r{r}.csv",
                    _text_csv(rows, ["probe_id", "gallery_id", "score", "selected"]))

    curve = structured_cmc(s, truth, range(1, n2 + 1), lp_iters) if s.size else None
    _write_text(out / "cmc.csv", curve.to_csv() if curve else "rank,rate\n")

    acc_rows = []
    if s.shape[0]:
        acc_rows.append(["structured", s.shape[0],
                         f"{matching_accuracy(structured_prediction(s, cfg.r, lp_iters), truth):.6f}"])
        acc_rows.append(["independent", s.shape[0],
                         f"{matching_accuracy(independent_prediction(s), truth):.6f}"])
    _write_text(out / "accuracy.csv", _text_csv(acc_rows, ["scenario", "probes", "accuracy"]))

    if curve is not None and truth.any():
        print(f"probes={s.shape[0]} galleries={n2} rank1={curve.rate(1):.4f}")
    else:
        print(f"probes={s.shape[0]} galleries={n2}")
    return EXIT_OK


def cmd_bench(args, cfg: PipelineConfig) -> int:
    rows = []
    if cfg.scale > 0:
        spec = SyntheticSpec(n_entities=cfg.scale, n_codewords=cfg.codebook_size, seed=cfg.seed)
        _, test = generate_synthetic(spec)
        rng = np.random.default_rng(cfg.seed)
        w = ModelWeights(spec.n_codewords, spec.n_codewords, rng.standard_normal(spec.n_codewords ** 2))
        for _ in range(cfg.trials):
            res = bench(test.probes, test.galleries, w, cfg.kernel_spec, cfg.r, cfg.max_lp_iters)
            rows.append(res.row())
    text = _text_csv(rows, BenchResult.HEADER)
    if args.out:
        _write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args, cfg: PipelineConfig) -> int:
    spec = SyntheticSpec(n_entities=args.entities, n_test=args.entities, n_codewords=args.codewords,
                         noise=args.noise, jitter=args.jitter, seed=cfg.seed)
    manifests = write_dataset(args.out_dir, spec, args.cell)
    for name, path in manifests.items():
        print(f"{name}: {path}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

def _converter(key):
    conv = CONVERTERS[key]

    def parse(text):
        try:
            return conv(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    parse.__name__ = key
    return parse


def _common_flags() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    g = p.add_argument_group("pipeline options (override --config)")
    g.add_argument("--config", type=Path, help="flat key=value configuration file")
    g.add_argument("--codebook-size", type=_converter("codebook_size"), help="codewords per view (500)")
    g.add_argument("--kernel", choices=["tgauss", "tlinear", "box"], help="spatial kernel (box)")
    g.add_argument("--sigma", type=_converter("sigma"), help="kernel scale in grid cells (3)")
    g.add_argument("--alpha", type=_converter("alpha"), help="truncation radius for tgauss (2*sigma)")
    g.add_argument("--patch", type=_converter("patch"), help="patch size in pixels (5)")
    g.add_argument("--stride", type=_converter("stride"), help="patch stride in pixels (1)")
    g.add_argument("--C", dest="C", type=_converter("C"), help="slack penalty (10)")
    g.add_argument("--r", type=_converter("r"), help="galleries per probe for matching accuracy (1)")
    g.add_argument("--ranks", type=_converter("ranks"), help="comma list of ranks to write (1,5,10,20)")
    g.add_argument("--seed", type=_converter("seed"), help="random seed (0)")
    g.add_argument("--max-planes", type=_converter("max_planes"), help="cutting-plane budget (200)")
    g.add_argument("--lp", type=_converter("lp"), help="matching solver: exact or capped:N (exact)")
    g.add_argument("--cache-dir", help="directory for activation/descriptor caches (off)")
    g.add_argument("--trials", type=_converter("trials"), help="benchmark repetitions (3)")
    g.add_argument("--sample-size", type=_converter("sample_size"),
                   help="features sampled per view for k-means (30000)")
    g.add_argument("--share-codebook", action="store_const", const=True,
                   help="train one codebook on both views")
    g.add_argument("--violation-tol", type=_converter("violation_tol"), help="training stop tolerance (1e-3)")
    g.add_argument("--scale", type=_converter("scale"), help="benchmark entities per view (40)")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = _Parser(prog="structreid", description="Structured matching for cross-view re-identification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-codebook", parents=[common], help="learn per-view codebooks")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_build_codebook)

    p = sub.add_parser("train", parents=[common], help="learn co-occurrence weights")
    p.add_argument("manifest", type=Path)
    p.add_argument("--codebooks", type=Path, required=True, help="directory with codebook_view{1,2}.prcb")
    p.add_argument("--out", type=Path, required=True, help="weights file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", parents=[common], help="match probes to galleries and score them")
    p.add_argument("manifest", type=Path)
    p.add_argument("--codebooks", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("bench", parents=[common], help="time the test-time stages on synthetic data")
    p.add_argument("--out", type=Path, help="CSV file (default stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic two-view dataset")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--entities", type=int, default=20)
    p.add_argument("--codewords", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--jitter", type=int, default=1)
    p.add_argument("--cell", type=int, default=5, help="pixels per codeword cell")
    p.set_defaults(func=cmd_synth)
    return parser


def config_from_args(args) -> PipelineConfig:
    file_values = read_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k, None) for k in CONVERTERS}
    return build_config(file_values, flags)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        try:
            cfg = config_from_args(args)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise UsageError(str(exc)) from exc
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
