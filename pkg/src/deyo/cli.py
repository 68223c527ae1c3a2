"""Command line: ``deyo {generate,train,eval,compare,analyze}``.

Exit codes: 0 success, 2 usage or configuration error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import evalkit
from .dataio import SceneSpec, read_dataset, write_dataset
from .trainer import (
    CheckpointArchive,
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    read_metrics,
    runs_root,
    train_strategy,
)

log = logging.getLogger("deyo")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


def _read_json(path: str, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} file {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{what} file {path} must hold an object")
    return doc


def _seed_all(seed: int | None) -> None:
    if seed is not None:
        torch.manual_seed(seed)
        np.random.seed(seed % 2**32)


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    doc = _read_json(args.spec, "spec") if args.spec else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = SceneSpec.from_dict(doc)
        spec.validate()
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid spec: {e}") from None
    if args.n <= 0:
        raise UsageError(f"--n must be positive (empty datasets are refused), got {args.n}")
    manifest = write_dataset(spec, args.n, args.out, start=args.start)
    print(manifest)
    return EXIT_OK


# ---------------------------------------------------------------- train


def resolve_config(args) -> TrainConfig:
    doc = _read_json(args.config, "config")
    overrides = {
        "strategy": args.strategy, "seed": args.seed, "name": args.name,
        "stage1_epochs": args.stage1_epochs, "stage2_epochs": args.stage2_epochs,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if "data" not in doc:
        raise ConfigError("missing dataset path: data.train")
    return TrainConfig.from_dict(doc)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    run_dir = (Path(args.runs_dir) if args.runs_dir else runs_root()) / cfg.name
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(run_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise UsageError(f"run directory {run_dir} is locked by another process") from None
    try:
        try:
            result = train_strategy(cfg, run_dir)
        except TrainingDiverged as e:
            (run_dir / "divergence.json").write_text(json.dumps(
                {"stage": e.stage, "epoch": e.epoch, "step": e.step, "value": repr(e.value)}, indent=2))
            print(f"error: {e}", file=sys.stderr)
            return EXIT_DIVERGED
    finally:
        lock.release()
    line = f"run={run_dir} strategy={cfg.strategy} final_ap50={result.final_ap50:.4f}"
    if result.final_ap50_o2m is not None:
        line += f" final_ap50_o2m={result.final_ap50_o2m:.4f}"
    print(line)
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _load_model(path: str):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    archive = CheckpointArchive.load(path)
    if not archive.meta.get("with_o2o") and not archive.meta.get("with_o2m"):
        raise UsageError(f"{path} is not a detector checkpoint")
    return archive.build_model()


def _load_data(path: str):
    try:
        return read_dataset(path).to_memory()
    except (FileNotFoundError, ValueError) as e:
        raise UsageError(str(e)) from None


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    data = _load_data(args.data)
    size = data.images.shape[1]
    if size % 32:
        raise ConfigError(f"image size {size} is not divisible by 32")
    branch = args.branch or ("o2o" if model.with_o2o else "o2m")
    if branch == "o2o" and not model.with_o2o:
        raise ConfigError("checkpoint has no one-to-one branch")
    if branch == "o2m" and not model.with_o2m:
        raise ConfigError("checkpoint has no one-to-many head")
    if data.num_classes != model.num_classes:
        raise ConfigError(f"dataset has {data.num_classes} classes, checkpoint {model.num_classes}")
    dets = evalkit.predict_dataset(model, data, branch=branch, postproc=args.postproc)
    gts = evalkit.dataset_gts(data)
    mode = "plain"
    if args.ideal:
        dets, mode = evalkit.ideal_rescore(dets, gts), "ideal"
    elif args.ideal_plus:
        dets, mode = evalkit.ideal_plus_rescore(dets, gts), "ideal_plus"
    report = evalkit.evaluate(dets, gts)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(f".eval_{mode}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = {"checkpoint": str(args.checkpoint), "data": str(args.data), "branch": branch,
           "postproc": args.postproc or ("query_filter" if branch == "o2o" else "nms"), "mode": mode,
           **report.to_dict()}
    out.write_text(json.dumps(doc, indent=2))
    if args.detections:
        evalkit.write_detections(args.detections, dets)
    print(f"{mode} {report.summary()} report={out}")
    return EXIT_OK


# ---------------------------------------------------------------- compare


def cmd_compare(args) -> int:
    curves: dict[str, dict[int, float]] = {}
    for run in args.runs:
        path = Path(run) / "metrics.csv" if Path(run).is_dir() else Path(run)
        if not path.exists():
            raise UsageError(f"no metrics.csv in {run}")
        rows = read_metrics(path)
        if not rows:
            raise UsageError(f"{path} is empty")
        label = rows[0]["strategy"] or path.parent.name
        if label in curves:
            label = f"{label}:{path.parent.name}"
        curves[label] = {int(r["epoch"]): float(r["ap50"]) for r in rows if r["ap50"] != ""}
    grids = [set(c) for c in curves.values()]
    common = sorted(set.intersection(*grids))
    if any(g != set(common) for g in grids):
        log.warning("runs have different epoch grids; aligning on the %d shared epochs", len(common))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "strategy", "ap50"])
        for label, c in curves.items():
            for e in common:
                w.writerow([e, label, f"{c[e]:.6f}"])
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, c in curves.items():
        ax.plot(common, [c[e] for e in common], marker="o", ms=3, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("AP50 (val)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, metadata={"Software": None} if out.suffix == ".png" else None)
    plt.close(fig)
    print(f"chart={out} csv={csv_path} curves={len(curves)}")
    return EXIT_OK


# ---------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "padded_queries":
        if not (args.checkpoint and args.data):
            raise UsageError("padded_queries needs --checkpoint and --data")
        model = _load_model(args.checkpoint)
        if not model.with_o2o:
            raise ConfigError("padded query analysis needs a one-to-one checkpoint")
        rep = evalkit.padded_query_analysis(model, _load_data(args.data), args.pad_threshold)
        with open(out / "padded_hist.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_lo", "bin_hi", "padded", "kept"])
            for k in range(len(rep.hist_padded)):
                w.writerow([rep.bin_edges[k], rep.bin_edges[k + 1], rep.hist_padded[k], rep.hist_kept[k]])
        (out / "padded_report.json").write_text(json.dumps(rep.to_dict(), indent=2))
        print(f"delta_ap50={rep.delta_ap50:+.6f} ap50_full={rep.ap50_full:.4f} "
              f"ap50_removed={rep.ap50_removed:.4f} padded={rep.num_padded}/{rep.num_queries}")
    elif args.mode == "latency":
        rep = evalkit.latency_stability(reps=args.reps, seed=args.seed or 0)
        with open(out / "latency.csv", "w", newline="") as f:
            w = csv.DictWriter(f, ["method", "density", "mean_s", "cv"])
            w.writeheader()
            w.writerows(rep.rows())
        (out / "latency_report.json").write_text(json.dumps(rep.to_dict(), indent=2))
        print(f"{'method':<13}" + "".join(f"{'cv@' + str(n):>10}" for n in rep.densities) + f"{'cv_across':>11}")
        for m, r in rep.methods.items():
            print(f"{m:<13}" + "".join(f"{v:>10.3f}" for v in r["cv"]) + f"{r['cv_across']:>11.3f}")
    else:  # argparse choices make this unreachable
        raise UsageError(f"unknown mode {args.mode!r}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deyo", description="Step-by-step trained end-to-end detector toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic shapes dataset")
    g.add_argument("--spec", help="JSON scene spec (defaults apply when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--start", type=int, default=0, help="first scene index")
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="run a training strategy")
    t.add_argument("--config", required=True)
    t.add_argument("--strategy", choices=("yolo_scratch", "detr_pretrain", "step_by_step", "joint"))
    t.add_argument("--name")
    t.add_argument("--seed", type=int)
    t.add_argument("--stage1-epochs", type=int)
    t.add_argument("--stage2-epochs", type=int)
    t.add_argument("--runs-dir", help="overrides DEYO_RUNS_DIR")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--postproc", choices=("query_filter", "nms"))
    e.add_argument("--branch", choices=("o2o", "o2m"))
    mx = e.add_mutually_exclusive_group()
    mx.add_argument("--ideal", action="store_true")
    mx.add_argument("--ideal-plus", action="store_true")
    e.add_argument("--out")
    e.add_argument("--detections", help="also write detections JSON here")
    e.add_argument("--seed", type=int)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", help="AP50-vs-epoch curves of several runs")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--out", required=True, help="chart path (.png/.svg/.pdf)")
    c.add_argument("--csv", help="combined CSV path (default: next to the chart)")
    c.add_argument("--seed", type=int)
    c.set_defaults(fn=cmd_compare)

    a = sub.add_parser("analyze", help="padded-query or latency analysis")
    a.add_argument("--mode", required=True, choices=("padded_queries", "latency"))
    a.add_argument("--checkpoint")
    a.add_argument("--data")
    a.add_argument("--pad-threshold", type=float, default=0.05)
    a.add_argument("--reps", type=int, default=200)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)
    a.set_defaults(fn=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _seed_all(getattr(args, "seed", None))
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
