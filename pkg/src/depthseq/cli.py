"""Command-line entry point: ``depthseq <subcommand> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import gradsuite, hemisplit, pipeline
from .checkpoint import load_checkpoint
from .model import ModelConfig, estimate_flops, voxel_attention_flops
from .objectives import per_segment_volume
from .phantom import PhantomSpec, write_cohort
from .segments import assign_segments
from .volume_io import SEGMENT_NAMES, load_mask, load_volume, save_mask

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_DIVERGED = 3
DATA_ENV = "DEPTHSEQ_DATA_DIR"


def data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _emit(data, out: str | None) -> None:
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def load_train_config(args) -> pipeline.TrainConfig:
    cfg = pipeline.TrainConfig()
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise pipeline.PipelineError(f"cannot read config {args.config}: {exc}") from exc
        cfg = pipeline.TrainConfig.from_dict(raw)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "fold", None) is not None:
        changes["fold"] = args.fold
    manifest = getattr(args, "manifest", None)
    if manifest:
        changes["manifest"] = manifest
    elif cfg.manifest is None:
        changes["manifest"] = str(data_root() / "manifest.json")
    return cfg.replace(**changes) if changes else cfg


# ---------------------------------------------------------------- commands

def cmd_phantom(args) -> int:
    spec_kwargs = {"dims": args.dims, "seed": args.seed}
    if args.min_depth is not None:
        spec_kwargs["min_depth"] = args.min_depth
    spec = PhantomSpec(**spec_kwargs)
    out = Path(args.out) if args.out else data_root()
    path = write_cohort(spec, args.count, out, seed=args.seed, task=args.task)
    _emit({"manifest": str(path), "count": args.count}, None)
    return EXIT_OK


def cmd_split(args) -> int:
    v = load_volume(args.input)
    res = hemisplit.separate_hemispheres(v, hu_min=args.hu_min, connectivity=args.connectivity)
    for path in (args.out_left, args.out_right):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_mask(res.left, args.out_left, like=v)
    save_mask(res.right, args.out_right, like=v)
    _emit({"left_voxels": res.left.count(), "right_voxels": res.right.count(),
           "left": args.out_left, "right": args.out_right}, None)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_train_config(args)
    out = Path(args.out)
    rep = pipeline.train(cfg, out_dir=out)
    pipeline.write_json(out / "train_config.json", cfg.to_dict())
    _emit(rep.to_dict(), None)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_train_config(args)
    out = Path(args.out)
    if args.cv:
        cohort = pipeline.load_cohort(cfg.manifest)
        res = pipeline.cross_validate(cfg, cohort, out_dir=out)
        _emit({"aggregate": res["aggregate"], "folds": len(res["folds"])}, None)
        return EXIT_OK
    if not args.checkpoint:
        raise pipeline.PipelineError("eval needs --checkpoint or --cv")
    cohort = pipeline.load_cohort(cfg.manifest)
    ckpt = load_checkpoint(args.checkpoint)
    task = ckpt.extra.get("task", cfg.task)
    plan = pipeline.make_folds(cohort.ids, cfg.k_folds, cfg.seed)
    pipeline.check_fold(plan, cfg.fold)
    metrics, rows = pipeline.evaluate(args.checkpoint, cohort, list(plan.folds[cfg.fold].test), task)
    pipeline.write_json(out / "metrics.json", metrics)
    pipeline.write_csv(out / "cases.csv", rows, pipeline.CSV_COLUMNS if task == "landmarks" else None)
    _emit(metrics, None)
    return EXIT_OK


def cmd_infer(args) -> int:
    _emit(pipeline.infer(args.checkpoint, args.volume), args.out)
    return EXIT_OK


def cmd_assign(args) -> int:
    v = load_volume(args.volume)
    calc = load_mask(args.calc)
    if args.landmarks:
        lm = args.landmarks
    else:
        lm = json.loads(Path(args.landmarks_json).read_text(encoding="utf-8"))["landmarks"]
    hemis = hemisplit.separate_hemispheres(v, hu_min=args.hu_min)
    labels = assign_segments(calc, lm, hemis, z_increases_superior=not args.z_decreases_superior,
                             proximal_inclusive=not args.distal_inclusive)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_mask(labels, args.out, like=v)
    vols = per_segment_volume(labels, v.spacing)
    _emit({"labels": args.out, "volume_mm3": dict(zip(SEGMENT_NAMES, vols.tolist()))}, None)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_train_config(args)
    cohort = pipeline.load_cohort(cfg.manifest)
    res = pipeline.run_ablation(cfg, args.axis, cohort, seeds=args.seeds, out_dir=args.out)
    _emit({"axis": res["axis"], "summary": res["summary"]}, None)
    return EXIT_OK


def cmd_flops(args) -> int:
    if args.config:
        cfg = pipeline.TrainConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8"))).model_config
    else:
        cfg = ModelConfig()
    if args.d_max is not None:
        cfg = cfg.replace(d_max=args.d_max)
    est = estimate_flops(cfg, args.dims)
    est["voxel_attention_flops"] = voxel_attention_flops(cfg, args.dims)
    _emit(est, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.ops or list(gradsuite.CASES)
    unknown = sorted(set(names) - set(gradsuite.CASES))
    if unknown:
        raise pipeline.PipelineError(f"unknown ops {unknown}; choose from {sorted(gradsuite.CASES)}")
    results = gradsuite.run_suite(args.shapes, args.seed, names)
    report = {r.name: r.worst for r in results}
    _emit({"max_rel_error": report, "tolerance": args.tol}, None)
    return EXIT_OK if all(e < args.tol for e in report.values()) else EXIT_INVALID


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthseq", description="Slice-level landmark localization on CT volumes.")
    sub = p.add_subparsers(dest="command", required=True)

    def training_args(sp):
        sp.add_argument("--config", help="TrainConfig JSON file")
        sp.add_argument("--manifest", help=f"cohort manifest (default ${DATA_ENV}/manifest.json)")
        sp.add_argument("--fold", type=int)
        sp.add_argument("--seed", type=int, help="override the config seed")

    sp = sub.add_parser("phantom", help="write a synthetic cohort")
    sp.add_argument("--count", type=int, default=64)
    sp.add_argument("--dims", type=_ints, default=(32, 32, 24))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--min-depth", type=int)
    sp.add_argument("--task", choices=pipeline.TASKS, default="landmarks")
    sp.add_argument("--out", help=f"output directory (default ${DATA_ENV} or ./data)")
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("split-hemispheres", help="left/right masks for a volume")
    sp.add_argument("--in", dest="input", required=True, help="input .dstvol volume")
    sp.add_argument("--out-left", required=True)
    sp.add_argument("--out-right", required=True)
    sp.add_argument("--hu-min", type=float, default=hemisplit.DEFAULT_HU_MIN)
    sp.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("train", help="train one fold")
    training_args(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a fold's test split, or run --cv")
    training_args(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--cv", action="store_true", help="train and test every fold")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="landmarks and probabilities for one volume")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("volume")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("assign-segments", help="label calcified voxels by segment")
    sp.add_argument("--volume", required=True)
    sp.add_argument("--calc", required=True, help="binary calcification mask")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--landmarks", type=_ints, help="six comma-separated slice indices")
    g.add_argument("--landmarks-json", help="output of `depthseq infer`")
    sp.add_argument("--out", required=True)
    sp.add_argument("--hu-min", type=float, default=hemisplit.DEFAULT_HU_MIN)
    sp.add_argument("--distal-inclusive", action="store_true", help="boundary slices join the distal segment")
    sp.add_argument("--z-decreases-superior", action="store_true")
    sp.set_defaults(func=cmd_assign)

    sp = sub.add_parser("ablate", help="paired-seed ablation")
    training_args(sp)
    sp.add_argument("--axis", choices=pipeline.ABLATION_AXES, required=True)
    sp.add_argument("--seeds", type=_ints, default=(0, 1, 2, 3, 4))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("flops", help="analytic FLOP estimate")
    sp.add_argument("--config")
    sp.add_argument("--dims", type=_ints, default=(32, 32, 24))
    sp.add_argument("--d-max", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_flops)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--ops", nargs="*")
    sp.add_argument("--shapes", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except pipeline.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
