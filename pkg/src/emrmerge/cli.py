"""Command-line interface: ``emr-merge {merge,apply,analyze,inspect}``.

Exit codes: 0 success, 2 configuration error or unknown task, 3 alignment
error, 4 I/O or file-format error, 5 base fingerprint mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import _parallel
from .analysis import analyze_bundle, analyze_merged, emit_report, report_csv, report_json, storage_summary
from .baselines import (
    DARE_RNG_VERSION,
    DareConfig,
    MergeConfig,
    dare_preprocess,
    fisher_merge,
    regmean_merge,
    task_arithmetic_merge,
    ties_merge,
    weight_average,
)
from .checkpoint_io import Checkpoint, DType, read_checkpoint, write_checkpoint
from .emr import apply_bundle, emr_merge, unified_dtype
from .errors import (
    AlignmentError,
    BundleFormatError,
    CheckpointFormatError,
    ConfigError,
    FingerprintMismatch,
    UnknownTaskError,
)
from .modulator_store import bundle_from_bytes, save_bundle
from .task_vector import TaskVectorSet, apply_task_vector, compute_task_vector, fingerprint

log = logging.getLogger("emrmerge")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ALIGNMENT = 3
EXIT_IO = 4
EXIT_FINGERPRINT = 5

METHODS = ("emr", "average", "task_arithmetic", "ties", "fisher", "regmean")

CONFIG_KEYS = {
    "method", "lambda", "ties_keep_fraction", "ties_trim", "dare", "regmean_offdiag",
    "base", "models", "labels", "fishers", "grams", "out", "report", "report_format",
    "compute_dtype", "thread_count", "seed", "per_tensor_rescaler", "rescaler_method",
}
PATH_KEYS = ("base", "models", "fishers", "grams", "out", "report")
DARE_KEYS = {"drop_prob", "seed"}


def _load_config(path: Path) -> dict[str, Any]:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(data) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown config key(s): {', '.join(unknown)}")
    dare = data.get("dare")
    if dare is not None:
        if not isinstance(dare, dict) or set(dare) - DARE_KEYS or "drop_prob" not in dare:
            raise ConfigError(f"{path}: 'dare' must be an object with 'drop_prob' and optional 'seed'")
    # relative paths resolve against the config file's directory
    root = path.parent
    for key in PATH_KEYS:
        value = data.get(key)
        if isinstance(value, str):
            data[key] = str(root / value)
        elif isinstance(value, list):
            data[key] = [str(root / v) for v in value]
    return data


def _job_from_args(args: argparse.Namespace) -> dict[str, Any]:
    job: dict[str, Any] = _load_config(Path(args.config)) if args.config else {}
    flag_map = {
        "method": args.method,
        "lambda": args.lam,
        "ties_keep_fraction": args.keep,
        "ties_trim": args.trim,
        "regmean_offdiag": args.regmean_a,
        "base": args.base,
        "models": args.models,
        "labels": args.labels,
        "fishers": args.fishers,
        "grams": args.grams,
        "out": args.out,
        "report": args.report,
        "report_format": args.format,
        "compute_dtype": args.compute_dtype,
        "thread_count": args.threads,
        "per_tensor_rescaler": args.per_tensor_rescaler or None,
        "rescaler_method": args.rescaler_method,
    }
    for key, value in flag_map.items():
        if value is not None:
            job[key] = value
    if args.dare_p is not None:
        job["dare"] = {**(job.get("dare") or {}), "drop_prob": args.dare_p}
    if args.seed is not None:
        job["seed"] = args.seed
        if job.get("dare"):
            job["dare"] = {**job["dare"], "seed": args.seed}
    for key in ("method", "base", "models", "out"):
        if not job.get(key):
            raise ConfigError(f"missing required setting {key!r}")
    if job["method"] not in METHODS:
        raise ConfigError(f"unknown method {job['method']!r}; expected one of {', '.join(METHODS)}")
    return job


def _require_files(paths: Sequence[str]) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")


def _labels(paths: Sequence[str], given: Sequence[str] | None) -> list[str]:
    if given:
        if len(given) != len(paths):
            raise ConfigError(f"{len(given)} labels for {len(paths)} models")
        if len(set(given)) != len(given):
            raise ConfigError("task labels must be unique")
        return list(given)
    labels: list[str] = []
    for i, p in enumerate(paths):
        stem = Path(p).name.split(".")[0] or f"task{i}"
        labels.append(stem if stem not in labels else f"{stem}-{i}")
    return labels


def _dare(job: dict[str, Any]) -> DareConfig | None:
    dare = job.get("dare")
    if not dare:
        return None
    seed = dare.get("seed", job.get("seed", 0))
    return DareConfig(float(dare["drop_prob"]), int(seed))


def _compute_dtype(value: str | None) -> DType:
    dtype = DType(value or "F64")
    if dtype not in (DType.F32, DType.F64):
        raise ConfigError(f"compute dtype must be F32 or F64, got {dtype.value}")
    return dtype


def cmd_merge(args: argparse.Namespace) -> int:
    job = _job_from_args(args)
    method = job["method"]
    try:
        compute = _compute_dtype(job.get("compute_dtype"))
    except ValueError:
        raise ConfigError(f"unknown compute dtype {job.get('compute_dtype')!r}") from None
    dare = _dare(job)
    cfg = None
    if method != "emr":
        cfg = MergeConfig(
            method,
            lam=job.get("lambda"),
            ties_keep_fraction=float(job.get("ties_keep_fraction", 0.2)),
            ties_trim=job.get("ties_trim", "global"),
            dare=dare,
            regmean_offdiag=float(job.get("regmean_offdiag", 1.0)),
        )
    model_paths = list(job["models"])
    fisher_paths = list(job.get("fishers") or [])
    gram_paths = list(job.get("grams") or [])
    if method == "fisher" and len(fisher_paths) != len(model_paths):
        raise ConfigError("fisher merging needs one --fishers file per model")
    if method == "regmean" and len(gram_paths) != len(model_paths):
        raise ConfigError("regmean merging needs one --grams file per model")
    labels = _labels(model_paths, job.get("labels"))
    _require_files([job["base"], *model_paths, *fisher_paths, *gram_paths])
    _parallel.set_threads(_parallel.resolve_threads(job.get("thread_count")))

    base = read_checkpoint(job["base"])
    models = [read_checkpoint(p) for p in model_paths]
    tasks = TaskVectorSet.from_checkpoints(base, models, labels, compute)
    if dare is not None:
        tasks = TaskVectorSet(
            tasks.base_fingerprint,
            tuple(dare_preprocess(tv, dare.drop_prob, dare.seed) for tv in tasks),
        )
    seed = dare.seed if dare else int(job.get("seed", 0))
    meta = {"emrmerge.method": method, "emrmerge.seed": str(seed)}
    if dare:
        meta["emrmerge.dare_drop_prob"] = repr(dare.drop_prob)
        meta["emrmerge.dare_rng"] = DARE_RNG_VERSION

    out = Path(job["out"])
    report_path = job.get("report")
    report_format = job.get("report_format", "json")
    if method == "emr":
        bundle = emr_merge(
            tasks,
            per_tensor_rescaler=bool(job.get("per_tensor_rescaler", False)),
            rescaler_method=job.get("rescaler_method", "mean_abs"),
        )
        bundle = dataclasses.replace(bundle, metadata={**bundle.metadata, **meta})
        layout = save_bundle(bundle, out)
        log.info("wrote bundle %s (%d bytes)", out, layout.total)
        if report_path:
            emit_report(analyze_bundle(tasks, bundle, layout), report_path, report_format)
        return EXIT_OK

    if dare is not None:
        models = [apply_task_vector(base, tv) for tv in tasks]
    lam = cfg.coefficient
    if method == "average":
        merged = weight_average(models, like=base, compute_dtype=compute)
    elif method == "task_arithmetic":
        merged = task_arithmetic_merge(tasks, base, lam)
    elif method == "ties":
        merged = ties_merge(tasks, base, lam, cfg.ties_keep_fraction, cfg.ties_trim)
    elif method == "fisher":
        fishers = [read_checkpoint(p) for p in fisher_paths]
        merged = fisher_merge(models, fishers, like=base, compute_dtype=compute)
    else:
        grams = [dict(read_checkpoint(p).tensors) for p in gram_paths]
        merged = regmean_merge(models, grams, cfg.regmean_offdiag, like=base)
    if method in ("task_arithmetic", "ties"):
        meta["emrmerge.lambda"] = repr(float(lam))
    merged = Checkpoint(merged.tensors, meta)
    write_checkpoint(merged, out)
    log.info("wrote merged checkpoint %s", out)
    if report_path:
        merged_tv = compute_task_vector(merged, base, method, compute)
        emit_report(analyze_merged(tasks, merged_tv, method), report_path, report_format)
    return EXIT_OK


def _read_bundle(path: str):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"bundle not found: {path}")
    return bundle_from_bytes(p.read_bytes(), p)


def cmd_apply(args: argparse.Namespace) -> int:
    _require_files([args.base])
    bundle, _ = _read_bundle(args.bundle)
    bundle.modulator(args.task)
    base = read_checkpoint(args.base)
    if args.no_fingerprint_check:
        print("warning: skipping base fingerprint check", file=sys.stderr)
    out = apply_bundle(base, bundle, args.task, check_fingerprint=not args.no_fingerprint_check)
    write_checkpoint(out, args.out)
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    _require_files([args.base, *args.models])
    compute = _compute_dtype(args.compute_dtype)
    base = read_checkpoint(args.base)
    models = [read_checkpoint(p) for p in args.models]
    bundle = layout = None
    if args.bundle:
        bundle, layout = _read_bundle(args.bundle)
        if bundle.base_fingerprint != fingerprint(base):
            print("warning: bundle was built against a different base", file=sys.stderr)
    if args.labels:
        labels = _labels(args.models, args.labels)
    elif bundle is not None and len(bundle.labels) == len(models):
        labels = bundle.labels
    else:
        labels = _labels(args.models, None)
    tasks = TaskVectorSet.from_checkpoints(base, models, labels, compute)
    if bundle is not None:
        report = analyze_bundle(tasks, bundle, layout, space=args.space, base=base)
    else:
        _require_files([args.merged])
        merged = read_checkpoint(args.merged)
        merged_tv = compute_task_vector(merged, base, "merged", compute)
        report = analyze_merged(tasks, merged_tv, "merged", space=args.space, base=base)
    if args.report:
        emit_report(report, args.report, args.format)
    else:
        sys.stdout.write(report_json(report) if args.format == "json" else report_csv(report))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    bundle, layout = _read_bundle(args.bundle)
    storage = storage_summary(bundle, layout)
    if args.json:
        payload = {
            "base_fingerprint": bundle.base_fingerprint,
            "unified_dtype": unified_dtype(bundle),
            "tasks": [
                {"task": m.label, "mask_density": m.density, "rescaler": m.rescaler}
                for m in bundle.modulators
            ],
            "storage": storage,
            "metadata": dict(bundle.metadata),
        }
        print(json.dumps(payload, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"bundle:           {args.bundle}")
    print(f"base fingerprint: {bundle.base_fingerprint}")
    print(f"tasks: {len(bundle.modulators)}  d: {bundle.d}  unified dtype: {unified_dtype(bundle)}")
    width = max(4, *(len(m.label) for m in bundle.modulators))
    print(f"{'task':<{width}}  {'density':>8}  rescaler")
    for m in bundle.modulators:
        scale = "per-tensor" if m.per_tensor else f"{m.rescaler:.6g}"
        print(f"{m.label:<{width}}  {m.density:8.4f}  {scale}")
    print(
        f"file bytes: {layout.total} = preamble {layout.preamble_bytes} + index {layout.index_bytes}"
        f" + unified {layout.unified_bytes} + masks {layout.mask_bytes}"
    )
    mod_bytes = storage["mask_bytes"] + storage["rescaler_bytes"]
    print(f"modulator bytes (masks + rescalers): {mod_bytes}")
    print(f"separate F32 task vectors: {storage['separate_f32_task_vector_bytes']} bytes")
    print(f"compression ratio: {storage['modulator_ratio']:.2f}x")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emr-merge", description="Merge finetuned checkpoints into EMR bundles or single merged models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    m = sub.add_parser("merge", help="merge finetuned checkpoints")
    m.add_argument("--config", help="JSON job file; flags override its values")
    m.add_argument("--method", choices=METHODS)
    m.add_argument("--base")
    m.add_argument("--models", nargs="+")
    m.add_argument("--labels", nargs="+")
    m.add_argument("--fishers", nargs="+")
    m.add_argument("--grams", nargs="+")
    m.add_argument("--out")
    m.add_argument("--report")
    m.add_argument("--format", choices=("json", "csv"))
    m.add_argument("--lambda", dest="lam", type=float)
    m.add_argument("--keep", type=float, help="Ties keep fraction")
    m.add_argument("--trim", choices=("global", "per_tensor"))
    m.add_argument("--dare-p", type=float, help="DARE drop probability")
    m.add_argument("--seed", type=int)
    m.add_argument("--regmean-a", type=float)
    m.add_argument("--compute-dtype", choices=("F32", "F64"))
    m.add_argument("--threads", type=int)
    m.add_argument("--per-tensor-rescaler", action="store_true")
    m.add_argument("--rescaler-method", choices=("mean_abs", "least_squares"))
    m.set_defaults(func=cmd_merge)

    a = sub.add_parser("apply", help="reconstruct one task's checkpoint from a bundle")
    a.add_argument("--bundle", required=True)
    a.add_argument("--base", required=True)
    a.add_argument("--task", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--no-fingerprint-check", action="store_true")
    a.set_defaults(func=cmd_apply)

    z = sub.add_parser("analyze", help="weight-space report for a merge")
    z.add_argument("--base", required=True)
    z.add_argument("--models", nargs="+", required=True)
    z.add_argument("--labels", nargs="+")
    src = z.add_mutually_exclusive_group(required=True)
    src.add_argument("--merged")
    src.add_argument("--bundle")
    z.add_argument("--report")
    z.add_argument("--format", choices=("json", "csv"), default="json")
    z.add_argument("--space", choices=("task_vector", "weights"), default="task_vector")
    z.add_argument("--compute-dtype", choices=("F32", "F64"))
    z.set_defaults(func=cmd_analyze)

    i = sub.add_parser("inspect", help="summarize a bundle file")
    i.add_argument("--bundle", required=True)
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FingerprintMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except (ConfigError, UnknownTaskError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AlignmentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALIGNMENT
    except (CheckpointFormatError, BundleFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as exc:
        print(f"error: invalid setting: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        _parallel.set_threads(None)


if __name__ == "__main__":
    raise SystemExit(main())
