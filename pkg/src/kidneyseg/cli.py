"""Command-line entry points: ``preprocess``, ``train``, ``infer``, ``evaluate``.

Every command resolves its parameters from defaults, then an optional JSON
config file, then command-line flags, and writes the result (with the origin
of each value) to ``resolved_config.json`` next to its outputs. That file
can be fed back through ``--config`` to repeat a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import (CaseRecord, VolumeFormatError, atomic_write_text, build_manifest, load_mask,
                   load_volume, read_folds, save_mask, split_folds, write_folds)
from .evaluation import HEC_NAMES, evaluate_dataset
from .inference import CascadePipeline, PipelineConfig
from .preprocessing import (COARSE_SHAPE, FINE_INPLANE, ROI_MARGIN, KIDNEY_LABELS, NoKidneyError,
                            clip_and_normalize, compute_roi, crop_roi, resample_volume)
from .training import STAGES, StageConfig, TrainCase, read_log, train_stage

log = logging.getLogger("kidneyseg")

OUTPUT_ROOT_ENV = "KIDNEYSEG_OUTPUT_ROOT"
EXIT_OK, EXIT_FAILURES, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------- config

def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignments(items: Sequence[str]) -> Dict[str, Any]:
    """``["a=1", "augment.elastic_prob=0"]`` -> nested dict of JSON-decoded values."""
    out: Dict[str, Any] = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    return out


def read_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        payload = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p} is not valid JSON: {exc}") from exc
    # a resolved_config.json written by a previous run
    if isinstance(payload, dict) and "values" in payload and "provenance" in payload:
        payload = payload["values"]
    if not isinstance(payload, dict):
        raise ConfigError(f"{p} must contain a JSON object")
    return payload


def resolve_config(defaults: Dict[str, Any], file_values: Dict[str, Any],
                   flag_values: Dict[str, Any]) -> Tuple[Dict[str, Any], Dict[str, str]]:
    """Merge defaults <- file <- flags (one level of nesting) and record provenance."""
    values = json.loads(json.dumps(defaults))
    provenance = {}

    def flat_keys(d, prefix=""):
        for k, v in d.items():
            if isinstance(v, dict) and v:
                yield from flat_keys(v, f"{prefix}{k}.")
            else:
                yield f"{prefix}{k}"

    for key in flat_keys(values):
        provenance[key] = "default"
    for source, layer in (("file", file_values), ("flag", flag_values)):
        for key, value in layer.items():
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(values[key], dict) and isinstance(value, dict):
                for sub, v in value.items():
                    if sub not in values[key]:
                        raise ConfigError(f"unknown config key {key}.{sub}")
                    values[key][sub] = v
                    provenance[f"{key}.{sub}"] = source
            else:
                values[key] = value
                provenance[key] = source
    return values, provenance


def write_resolved(out_dir: Path, command: str, values: dict, provenance: dict) -> Path:
    path = Path(out_dir) / "resolved_config.json"
    atomic_write_text(path, json.dumps({"command": command, "values": values,
                                        "provenance": provenance}, indent=2, default=str))
    return path


def output_path(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


# --------------------------------------------------------------- preprocess

PREPROCESS_DEFAULTS = {
    "folds": 5,
    "seed": 0,
    "coarse_shape": list(COARSE_SHAPE),
    "fine_inplane": list(FINE_INPLANE),
    "roi_margin": ROI_MARGIN,
}


def _fresh(out: Path, sources: Sequence[Path]) -> bool:
    return out.is_file() and all(out.stat().st_mtime >= s.stat().st_mtime for s in sources)


def _save_npz(path: Path, **arrays) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.stem + ".tmp.npz")
    np.savez_compressed(tmp, **arrays)
    os.replace(tmp, path)


def preprocess_case(case: CaseRecord, out_dir: Path, cfg: dict) -> str:
    """Write ``coarse/<id>.npz`` and ``fine/<id>.npz`` for one labelled case."""
    coarse_out = out_dir / "coarse" / f"{case.case_id}.npz"
    fine_out = out_dir / "fine" / f"{case.case_id}.npz"
    sources = [case.image_path, case.mask_path]
    if _fresh(coarse_out, sources) and _fresh(fine_out, sources):
        return "skipped"
    vol = clip_and_normalize(load_volume(case.image_path))
    mask = load_mask(case.mask_path, vol)

    small = resample_volume(vol, cfg["coarse_shape"])
    small_mask = resample_volume(mask, cfg["coarse_shape"])
    _save_npz(coarse_out, image=small.voxels, labels=small_mask.labels, spacing=np.array(small.spacing),
              source_shape=np.array(vol.shape))

    box = compute_roi(mask, KIDNEY_LABELS, cfg["roi_margin"])
    roi, roi_mask = crop_roi(vol, box), crop_roi(mask, box)
    target = (roi.shape[0], *cfg["fine_inplane"])
    roi = resample_volume(roi, target)
    roi_mask = resample_volume(roi_mask, target)
    _save_npz(fine_out, image=roi.voxels, labels=roi_mask.labels, spacing=np.array(roi.spacing),
              roi=np.array(box.to_list()), source_shape=np.array(vol.shape))
    return "written"


def cmd_preprocess(args) -> int:
    values, provenance = resolve_config(PREPROCESS_DEFAULTS, read_config_file(args.config),
                                        _drop_none({"folds": args.folds, "seed": args.seed,
                                                    "coarse_shape": args.coarse_shape,
                                                    "fine_inplane": args.fine_inplane,
                                                    "roi_margin": args.roi_margin}))
    out_dir = output_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(args.data_root)
    failures = []
    labelled = []
    for case in manifest:
        if case.mask_path is None:
            log.warning("%s has no segmentation; not usable for training", case.case_id)
            continue
        try:
            status = preprocess_case(case, out_dir, values)
        except (VolumeFormatError, ValueError, OSError, NoKidneyError) as exc:
            failures.append((case.case_id, f"{type(exc).__name__}: {exc}"))
            log.error("failed %s: %s", case.case_id, exc)
            continue
        labelled.append(case)
        log.info("%s %s", status, case.case_id)

    if len(labelled) >= 2:
        k = min(values["folds"], len(labelled))
        if k < values["folds"]:
            log.warning("only %d usable cases; using %d folds", len(labelled), k)
        folds = split_folds(labelled, k, values["seed"])
    else:
        folds = [(labelled, [])]
    write_folds(folds, out_dir / "folds.json")
    write_resolved(out_dir, "preprocess", values, provenance)

    if failures:
        print("preprocessing failed for:", file=sys.stderr)
        for case_id, msg in failures:
            print(f"  {case_id}: {msg}", file=sys.stderr)
        return EXIT_FAILURES
    return EXIT_OK


# -------------------------------------------------------------------- train

def _load_stage_cases(data_dir: Path, stage: str, ids: Sequence[str]) -> List[TrainCase]:
    sub = data_dir / ("coarse" if stage == "coarse" else "fine")
    cases = []
    for case_id in ids:
        path = sub / f"{case_id}.npz"
        if not path.is_file():
            raise ConfigError(f"missing preprocessed file {path}")
        cases.append(TrainCase.from_npz(path))
    return cases


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    folds_path = data_dir / "folds.json"
    if not folds_path.is_file():
        raise ConfigError(f"fold file not found: {folds_path} (run preprocess first)")
    folds = read_folds(folds_path)
    if not 0 <= args.fold < len(folds):
        raise ConfigError(f"fold {args.fold} out of range; {folds_path} has {len(folds)} folds")

    defaults = StageConfig.for_stage(args.stage).to_dict()
    flags = parse_assignments(args.set)
    flags.update(_drop_none({"total_epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
                             "base_channels": args.base_channels, "seed": args.seed}))
    file_values = read_config_file(args.config)
    file_values.pop("stage", None)
    values, provenance = resolve_config(defaults, file_values, flags)
    values["stage"] = args.stage
    cfg = StageConfig.from_dict(values)

    train_ids, val_ids = folds[args.fold]
    train_cases = _load_stage_cases(data_dir, args.stage, train_ids)
    val_cases = _load_stage_cases(data_dir, args.stage, val_ids)
    out_dir = output_path(args.out) / f"fold_{args.fold}"
    stage_dir = out_dir / f"stage_{args.stage}"
    stage_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(stage_dir, "train", cfg.to_dict(), provenance)
    best = train_stage(cfg, train_cases, val_cases, out_dir, resume=not args.restart)
    epochs = {r["epoch"] for r in read_log(stage_dir / "train_log.jsonl") if r.get("event") == "epoch"}
    print(f"{args.stage}: {len(epochs)} epoch(s) logged; best checkpoint {best}")
    return EXIT_OK


# -------------------------------------------------------------------- infer

_PIPELINE: Optional[CascadePipeline] = None


def _init_pipeline(cfg_dict: dict) -> None:
    global _PIPELINE
    _PIPELINE = CascadePipeline.from_config(PipelineConfig(**cfg_dict))


def _infer_one(job) -> Tuple[str, Optional[dict], Optional[str]]:
    case, out_dir = job
    try:
        mask, timing = _PIPELINE.run_case(case)
        save_mask(mask, Path(out_dir) / f"{case.case_id}.nii.gz")
        atomic_write_text(Path(out_dir) / f"{case.case_id}_timing.json", json.dumps(timing, indent=2))
        return case.case_id, timing, None
    except Exception as exc:
        log.debug("case %s failed:\n%s", case.case_id, traceback.format_exc())
        return case.case_id, None, str(exc)


def cmd_infer(args) -> int:
    defaults = PipelineConfig().to_dict()
    values, provenance = resolve_config(defaults, read_config_file(args.config), parse_assignments(args.set))
    cfg = PipelineConfig(**values)
    cfg.check_checkpoints()

    input_dir, out_dir = Path(args.input), output_path(args.output)
    cases = build_manifest(input_dir)
    if not cases:
        raise ConfigError(f"no cases found under {input_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(out_dir, "infer", cfg.to_dict(), provenance)

    jobs = [(c, str(out_dir)) for c in cases]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers, mp_context=get_context("spawn"),
                                 initializer=_init_pipeline, initargs=(cfg.to_dict(),)) as pool:
            results = list(pool.map(_infer_one, jobs))
    else:
        _init_pipeline(cfg.to_dict())
        results = [_infer_one(j) for j in jobs]

    timings = [t for _, t, _ in results if t is not None]
    failures = [{"case_id": c, "error": e} for c, _, e in results if e is not None]
    peaks = [t["peak_mem_mb"] for t in timings if t.get("peak_mem_mb") is not None]
    summary = {
        "cases": len(cases),
        "succeeded": len(timings),
        "failures": failures,
        "mean_seconds_per_case": float(np.mean([t["total_s"] for t in timings])) if timings else None,
        "peak_mem_mb": max(peaks) if peaks else None,
        "peak_rss_mb": max((t["peak_rss_mb"] for t in timings), default=None),
        "no_kidney_cases": [t["case_id"] for t in timings if "no_kidney_found" in t["warnings"]],
    }
    atomic_write_text(out_dir / "summary.json", json.dumps(summary, indent=2))
    if summary["mean_seconds_per_case"] is not None:
        print(f"inferred {len(timings)}/{len(cases)} cases; "
              f"mean {summary['mean_seconds_per_case']:.2f} s/case")
    for f in failures:
        print(f"FAILED {f['case_id']}: {f['error']}", file=sys.stderr)
    return EXIT_FAILURES if failures else EXIT_OK


# ----------------------------------------------------------------- evaluate

def _parse_tolerances(items: Sequence[str]) -> Dict[str, float]:
    out = {}
    for item in items or ():
        name, _, value = item.partition("=")
        if name not in HEC_NAMES or not value:
            raise ConfigError(f"--tolerance expects one of {HEC_NAMES}=<mm>, got {item!r}")
        out[name] = float(value)
    return out


def cmd_evaluate(args) -> int:
    defaults = {"tolerances": {h: 1.0 for h in HEC_NAMES}}
    flags = {"tolerances": _parse_tolerances(args.tolerance)} if args.tolerance else {}
    values, provenance = resolve_config(defaults, read_config_file(args.config), flags)
    for p in (args.pred, args.truth):
        if not Path(p).is_dir():
            raise ConfigError(f"not a directory: {p}")
    try:
        report = evaluate_dataset(args.pred, args.truth, values["tolerances"], workers=args.workers)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURES
    out_dir = output_path(args.out) if args.out else Path(args.pred)
    report.write(out_dir)
    write_resolved(out_dir, "evaluate", values, provenance)
    print(report.table())
    if report.missing:
        print(f"missing predictions scored as 0: {', '.join(report.missing)}", file=sys.stderr)
        return EXIT_FAILURES
    return EXIT_OK


# ---------------------------------------------------------------------- main

def _triple(text: str) -> List[int]:
    return [int(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kidneyseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="normalize/resample a KiTS-style dataset and write folds")
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--coarse-shape", type=_triple)
    p.add_argument("--fine-inplane", type=_triple)
    p.add_argument("--roi-margin", type=int)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one cascade stage on one fold")
    p.add_argument("--stage", required=True, choices=STAGES)
    p.add_argument("--data", required=True, help="output directory of `preprocess`")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", default="runs")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--restart", action="store_true", help="ignore an existing latest checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run the cascade on every case of a directory")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="Dice / Surface Dice per HEC against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--tolerance", action="append", default=[], metavar="HEC=MM")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
