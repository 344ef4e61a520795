"""Command-line surface: extract, select-sets, dilate, eval, rsd, synth, rank.

Exit codes: 0 success, 1 per-item data errors, 2 I/O / parse / environment
errors, 3 protocol violations, 64 flag-usage errors. Every run echoes its
resolved configuration into its outputs (inside JSON reports, or as a
``<output>.run.json`` sidecar next to CSV/manifest outputs).

Feature containers written by ``extract`` get a ``<out>.meta.json`` sidecar
carrying the extractor fingerprint and the set descriptor; ``eval`` and
``rsd`` read those sidecars to enforce the starred-metric protocol guard.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .dataset import (
    ManifestRow,
    ROLE_COMPARISON,
    ROLE_QUERY,
    build_class_mask,
    dilate,
    load_annotations,
    load_mask_png,
    read_manifest,
    save_mask_png,
    select_sets,
    write_manifest,
)
from .errors import (
    BackendError,
    FormatError,
    GenerationError,
    NumericalError,
    ProtocolError,
    RemovalEvalError,
    ValidationError,
)
from .evaluation import MetricReport, evaluate_unpaired, rank_removers, subsample_stability
from .features import (
    ExtractorSpec,
    extract_features,
    load_image_png,
    read_features,
    write_features,
)
from .pixel_metrics import import_pair_distances
from .svm import SvmConfig, p_ids
from .synth import REMOVER_METHODS, SceneSpec, emit_benchmark

EXIT_OK = 0
EXIT_DATA = 1
EXIT_ENV = 2
EXIT_PROTOCOL = 3
EXIT_USAGE = 64

THREADS_ENV = "REMOVAL_EVAL_THREADS"


class UsageError(RemovalEvalError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse errors onto exit code 64
        raise UsageError(message)


def _resolve_threads(value: Optional[int]) -> int:
    if value is not None:
        if value < 1:
            raise UsageError(f"--threads must be >= 1, got {value}")
        return value
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            parsed = int(env)
        except ValueError as exc:
            raise UsageError(f"{THREADS_ENV}={env!r} is not an integer") from exc
        if parsed < 1:
            raise UsageError(f"{THREADS_ENV} must be >= 1, got {parsed}")
        return parsed
    return 1


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_echo(args: argparse.Namespace) -> dict:
    skip = {"func"}
    echo = {k: v for k, v in vars(args).items() if k not in skip}
    echo["version"] = __version__
    return echo


def _write_run_config(primary_out: Path, args: argparse.Namespace) -> None:
    _write_json(primary_out.with_name(primary_out.name + ".run.json"), _config_echo(args))


def _meta_path(features_path: Path) -> Path:
    return features_path.with_name(features_path.name + ".meta.json")


def _read_meta(features_path: Path) -> Optional[dict]:
    meta = _meta_path(features_path)
    if not meta.is_file():
        return None
    with open(meta, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------

def _collect_inputs(args) -> tuple[list[tuple[str, Optional[Path]]], Optional[str]]:
    """Return ordered (id, image path) pairs plus the manifest role used."""
    source = Path(args.input)
    if source.is_dir():
        paths = sorted(source.rglob("*.png"), key=lambda p: p.relative_to(source).as_posix())
        if not paths:
            raise FormatError(f"no PNG files under directory {source}")
        items = [
            (p.relative_to(source).as_posix()[: -len(".png")], p) for p in paths
        ]
        return items, None
    if source.is_file() and source.suffix == ".json":
        rows = read_manifest(source)
        role = args.role
        if role != "all":
            rows = [r for r in rows if r.role == role]
        if not rows:
            raise FormatError(f"manifest {source} has no rows with role {role!r}")
        base = source.parent
        return [(r.id, base / r.image_path) for r in rows], (role if role != "all" else None)
    if source.exists():
        raise FormatError(f"input must be a directory or manifest JSON: {source}")
    raise FileNotFoundError(f"input path does not exist: {source}")


def cmd_extract(args) -> int:
    threads = _resolve_threads(args.threads)
    items, manifest_role = _collect_inputs(args)

    spec = ExtractorSpec(
        backend=args.backend,
        model_path=args.model,
        input_edge=args.input_edge,
        output_dim=args.output_dim or 0,
    )

    loaded: list[tuple[str, Optional[object]]] = []
    failures: list[tuple[str, str]] = []
    if spec.backend == "precomputed":
        loaded = [(image_id, None) for image_id, _ in items]
    else:
        for image_id, path in items:
            try:
                loaded.append((image_id, load_image_png(path)))
            except (FormatError, OSError) as exc:
                failures.append((image_id, str(exc)))

    wrote = False
    if loaded:
        matrix = extract_features(loaded, spec, threads=threads)
        out = Path(args.out)
        write_features(matrix, out)
        contains_target = {"true": True, "false": False, "unknown": None}[
            _resolve_contains_target(args.contains_target_class, manifest_role)
        ]
        _write_json(
            _meta_path(out),
            {
                "fingerprint": spec.fingerprint,
                "backend": spec.backend,
                "output_dim": spec.output_dim,
                "count": matrix.n,
                "contains_target_class": contains_target,
                "config_echo": _config_echo(args),
            },
        )
        wrote = True

    if failures:
        for image_id, message in failures:
            print(f"failed: {image_id}: {message}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if wrote else EXIT_DATA


def _resolve_contains_target(flag_value: str, manifest_role: Optional[str]) -> str:
    if flag_value != "auto":
        return flag_value
    if manifest_role == ROLE_COMPARISON:
        return "false"
    if manifest_role == ROLE_QUERY:
        return "true"
    return "unknown"


# ---------------------------------------------------------------------------
# select-sets
# ---------------------------------------------------------------------------

def cmd_select_sets(args) -> int:
    if not (0.0 <= args.min_cov < args.max_cov <= 1.0):
        raise UsageError(
            f"need 0 <= min-cov < max-cov <= 1, got [{args.min_cov}, {args.max_cov}]"
        )
    index = load_annotations(args.annotations)

    category_id: Optional[int] = None
    try:
        candidate = int(args.category)
        if candidate in index.categories:
            category_id = candidate
    except ValueError:
        for cat_id, name in index.categories.items():
            if name == args.category:
                category_id = cat_id
                break
    if category_id is None:
        print(f"warning: category {args.category!r} not found in annotations", file=sys.stderr)
        # Selection against a missing category: nothing qualifies as query.
        category_id = -1

    image_root = Path(args.image_root) if args.image_root else None

    def image_path(info) -> str:
        return str(image_root / info.file_name) if image_root else info.file_name

    if category_id == -1:
        query_rows: list[ManifestRow] = []
        comparison_ids = sorted(index.images)
    else:
        selection = select_sets(
            index, category_id, args.min_cov, args.max_cov, include_crowd=args.include_crowd
        )
        comparison_ids = list(selection.comparison)
        query_rows = []
        for image_id, coverage in selection.query:
            info = index.images[image_id]
            mask_path = None
            if args.masks_dir:
                mask = build_class_mask(index, image_id, category_id, args.include_crowd)
                mask_file = Path(args.masks_dir) / f"{image_id}.png"
                save_mask_png(mask, mask_file)
                mask_path = str(mask_file)
            query_rows.append(
                ManifestRow(
                    id=str(image_id),
                    image_path=image_path(info),
                    mask_path=mask_path,
                    role=ROLE_QUERY,
                    coverage=coverage,
                    kernel_size=0,
                )
            )

    comparison_rows = [
        ManifestRow(
            id=str(image_id),
            image_path=image_path(index.images[image_id]),
            mask_path=None,
            role=ROLE_COMPARISON,
            coverage=0.0,
            kernel_size=0,
        )
        for image_id in comparison_ids
    ]

    write_manifest(query_rows, args.query_out)
    write_manifest(comparison_rows, args.comparison_out)
    _write_run_config(Path(args.query_out), args)
    print(f"query: {len(query_rows)} images, comparison: {len(comparison_rows)} images")
    return EXIT_OK


# ---------------------------------------------------------------------------
# dilate
# ---------------------------------------------------------------------------

def cmd_dilate(args) -> int:
    if args.kernel < 0:
        raise UsageError(f"--kernel must be >= 0, got {args.kernel}")
    source = Path(args.input)
    out_dir = Path(args.out)
    failures: list[tuple[str, str]] = []

    if source.is_dir():
        paths = sorted(source.rglob("*.png"), key=lambda p: p.relative_to(source).as_posix())
        if not paths:
            raise FormatError(f"no PNG masks under directory {source}")
        for path in paths:
            rel = path.relative_to(source)
            try:
                mask = load_mask_png(path)
                save_mask_png(dilate(mask, args.kernel), out_dir / rel)
            except (FormatError, OSError, ValidationError) as exc:
                failures.append((rel.as_posix(), str(exc)))
    elif source.is_file() and source.suffix == ".json":
        rows = read_manifest(source)
        base = source.parent
        new_rows = []
        for row in rows:
            if row.mask_path is None:
                new_rows.append(row)
                continue
            try:
                mask = load_mask_png(base / row.mask_path)
                new_path = out_dir / Path(row.mask_path).name
                save_mask_png(dilate(mask, args.kernel), new_path)
                new_rows.append(
                    ManifestRow(
                        id=row.id,
                        image_path=row.image_path,
                        mask_path=str(new_path),
                        role=row.role,
                        coverage=row.coverage,
                        kernel_size=args.kernel,
                    )
                )
            except (FormatError, OSError, ValidationError) as exc:
                failures.append((row.id, str(exc)))
        if args.manifest_out:
            write_manifest(new_rows, args.manifest_out)
    elif source.exists():
        raise FormatError(f"input must be a directory or manifest JSON: {source}")
    else:
        raise FileNotFoundError(f"input path does not exist: {source}")

    _write_run_config(out_dir / "dilate", args)
    if failures:
        for item_id, message in failures:
            print(f"failed: {item_id}: {message}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _svm_config(args) -> SvmConfig:
    return SvmConfig(c=args.svm_c, max_epochs=args.svm_max_epochs, tol=args.svm_tol, seed=args.seed)


def _comparison_cleanliness(meta: Optional[dict], flag_clean: bool) -> Optional[bool]:
    declared = meta.get("contains_target_class") if meta else None
    if flag_clean:
        if declared is True:
            raise ProtocolError(
                "--comparison-clean passed but the sidecar declares the comparison "
                "set contains target-class objects"
            )
        return False
    return declared


def cmd_eval(args) -> int:
    query = read_features(args.query)
    comparison = read_features(args.comparison)
    query_meta = _read_meta(Path(args.query))
    comparison_meta = _read_meta(Path(args.comparison))

    query_fp = (query_meta or {}).get("fingerprint")
    comparison_fp = (comparison_meta or {}).get("fingerprint")
    if query_fp and comparison_fp and query_fp != comparison_fp:
        raise ValidationError(
            f"extractor fingerprints differ: {query_fp[:12]}... vs {comparison_fp[:12]}..."
        )
    fingerprint = query_fp or comparison_fp or "unknown"

    contains_target = _comparison_cleanliness(comparison_meta, args.comparison_clean)
    cfg = _svm_config(args)
    report = evaluate_unpaired(
        query,
        comparison,
        cfg,
        starred=args.starred,
        query_fingerprint=fingerprint,
        comparison_fingerprint=fingerprint,
        comparison_contains_target=contains_target,
        label=args.label,
        config_echo=_config_echo(args),
    )

    if args.pairs:
        pairing = _read_pairs_csv(Path(args.pairs))
        report.metrics["p_ids"] = p_ids(comparison, query, pairing, cfg)
    if args.lpips:
        distances = import_pair_distances(args.lpips, query.ids)
        report.metrics["lpips_mean"] = float(np.mean(list(distances.values())))

    payload = report.to_json_dict()
    if args.out:
        _write_json(Path(args.out), payload)
    else:
        json.dump(payload, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    return EXIT_OK


def _read_pairs_csv(path: Path) -> dict[str, str]:
    """Pairs file: CSV with header ``query_id,reference_id``."""
    import csv

    pairing: dict[str, str] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["query_id", "reference_id"]:
            raise FormatError(
                f"expected header 'query_id,reference_id', got {header}", path=str(path)
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(f"line {lineno}: expected 2 fields", path=str(path))
            if row[0] in pairing:
                raise ValidationError(f"duplicate query id {row[0]!r} in {path}")
            pairing[row[0]] = row[1]
    return pairing


# ---------------------------------------------------------------------------
# rsd
# ---------------------------------------------------------------------------

def cmd_rsd(args) -> int:
    if args.iterations < 2:
        raise UsageError(f"--iterations must be >= 2, got {args.iterations}")
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s]
    except ValueError as exc:
        raise UsageError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from exc
    if not sizes or any(s < 2 for s in sizes):
        raise UsageError(f"--sizes entries must be >= 2, got {args.sizes!r}")

    query = read_features(args.query)
    comparison = read_features(args.comparison)
    oversized = [s for s in sizes if s > query.n]
    if oversized:
        print(
            f"error: sizes {oversized} exceed the query set size {query.n}", file=sys.stderr
        )
        return EXIT_ENV

    comparison_meta = _read_meta(Path(args.comparison))
    contains_target = _comparison_cleanliness(comparison_meta, args.comparison_clean)
    if contains_target is not False:
        raise ProtocolError(
            "rsd computes starred metrics; the comparison set must be declared free "
            "of target-class objects (sidecar or --comparison-clean)"
        )

    table = subsample_stability(query, comparison, sizes, args.iterations, args.seed, _svm_config(args))
    table.to_csv(args.out)
    _write_run_config(Path(args.out), args)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    methods = tuple(m for m in args.methods.split(",") if m)
    for method in methods:
        if method not in REMOVER_METHODS:
            raise UsageError(f"unknown method {method!r}; choose from {REMOVER_METHODS}")
    try:
        kernels = tuple(int(k) for k in args.kernels.split(",") if k)
    except ValueError as exc:
        raise UsageError(f"--kernels must be comma-separated integers, got {args.kernels!r}") from exc
    if args.n_scenes < 0:
        raise UsageError(f"--n-scenes must be >= 0, got {args.n_scenes}")

    spec = SceneSpec(
        width=args.width,
        height=args.height,
        target_fraction=args.target_fraction,
        seed=args.seed,
    )
    manifest = emit_benchmark(spec, args.n_scenes, args.out, methods=methods, kernels=kernels)
    _write_json(Path(args.out) / "config.json", _config_echo(args))
    print(f"manifest: {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# rank
# ---------------------------------------------------------------------------

def cmd_rank(args) -> int:
    reports = [MetricReport.load_json(path) for path in args.reports]
    rankings = rank_removers(reports)
    payload = {
        metric: {
            "higher_is_better": ranking.higher_is_better,
            "order": list(ranking.ordered_labels),
            "values": {k: ranking.values[k] for k in sorted(ranking.values)},
            "ties": [list(group) for group in ranking.ties],
        }
        for metric, ranking in sorted(rankings.items())
    }
    payload["config_echo"] = _config_echo(args)
    if args.out:
        _write_json(Path(args.out), payload)
    else:
        json.dump(payload, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="removal-eval", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract features from PNGs into a container")
    p.add_argument("input", help="directory of PNGs or a manifest JSON")
    p.add_argument("--backend", choices=("toy", "neural", "precomputed"), default="toy")
    p.add_argument("--model", help="model file (neural) or feature container (precomputed)")
    p.add_argument("--input-edge", type=int, default=299)
    p.add_argument("--output-dim", type=int, default=0, help="override backend default")
    p.add_argument("--role", choices=("query", "comparison", "all"), default="all",
                   help="manifest role filter")
    p.add_argument("--contains-target-class", choices=("auto", "true", "false", "unknown"),
                   default="auto", help="descriptor recorded in the sidecar")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("select-sets", help="split annotated images into query/comparison sets")
    p.add_argument("annotations", help="COCO-format annotation JSON")
    p.add_argument("--category", required=True, help="target category id or name")
    p.add_argument("--min-cov", type=float, default=0.05)
    p.add_argument("--max-cov", type=float, default=0.40)
    p.add_argument("--include-crowd", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--image-root", help="prefix for manifest image paths")
    p.add_argument("--masks-dir", help="write query class masks here")
    p.add_argument("--query-out", required=True)
    p.add_argument("--comparison-out", required=True)
    p.set_defaults(func=cmd_select_sets)

    p = sub.add_parser("dilate", help="dilate mask PNGs with a k x k structuring element")
    p.add_argument("input", help="directory of mask PNGs or a manifest JSON")
    p.add_argument("--kernel", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--manifest-out", help="rewritten manifest (manifest input only)")
    p.set_defaults(func=cmd_dilate)

    p = sub.add_parser("eval", help="FID(*) and U-IDS(*) between two feature containers")
    p.add_argument("--query", required=True)
    p.add_argument("--comparison", required=True)
    p.add_argument("--starred", action="store_true",
                   help="compute fid_star/uids_star (requires a clean comparison set)")
    p.add_argument("--comparison-clean", action="store_true",
                   help="declare the comparison set free of target-class objects")
    p.add_argument("--label", default="")
    p.add_argument("--pairs", help="CSV query_id,reference_id enabling p_ids")
    p.add_argument("--lpips", help="CSV id,distance of externally computed distances")
    p.add_argument("--svm-c", type=float, default=1.0)
    p.add_argument("--svm-max-epochs", type=int, default=200)
    p.add_argument("--svm-tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rsd", help="sample-size stability (RSD) of fid_star/uids_star")
    p.add_argument("--query", required=True)
    p.add_argument("--comparison", required=True)
    p.add_argument("--sizes", required=True, help="comma-separated subsample sizes")
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--comparison-clean", action="store_true")
    p.add_argument("--svm-c", type=float, default=1.0)
    p.add_argument("--svm-max-epochs", type=int, default=200)
    p.add_argument("--svm-tol", type=float, default=1e-6)
    p.add_argument("--out", required=True, help="stability CSV path")
    p.set_defaults(func=cmd_rsd)

    p = sub.add_parser("synth", help="emit a synthetic paired benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--target-fraction", type=float, default=0.5)
    p.add_argument("--methods", default=",".join(REMOVER_METHODS))
    p.add_argument("--kernels", default="0")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rank", help="order removers per metric from report JSONs")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rank)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (FormatError, OSError, BackendError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENV
    except (ValidationError, NumericalError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
