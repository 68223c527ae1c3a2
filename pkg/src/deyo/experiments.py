"""The strategy comparison suite, cached on disk by config hash.

``python -m deyo.experiments [--root DIR]`` trains every run that has no
finished result yet; later calls return the cached results.
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from .trainer import TrainConfig, load_data, runs_root, train_strategy

log = logging.getLogger(__name__)

SUITE = ("step_by_step", "backbone_only", "joint", "yolo_scratch", "detr_pretrain")


def suite_configs(root: Path, stage1_epochs: int = 30, stage2_epochs: int = 30, seed: int = 0) -> dict[str, TrainConfig]:
    """Default data (2000/500 scenes), N scale, equal epoch budgets.

    ``joint`` and ``backbone_only`` continue from the step_by_step stage-1
    checkpoint so all three share one dense pretraining run.
    """
    common = dict(seed=seed, stage1_epochs=stage1_epochs, stage2_epochs=stage2_epochs)
    sbs = TrainConfig(name="step_by_step", strategy="step_by_step", **common)
    s1 = str(run_dir(root, sbs) / "checkpoints" / "stage1.safetensors")
    return {
        "step_by_step": sbs,
        "backbone_only": TrainConfig(name="backbone_only", strategy="step_by_step", transfer_neck=False,
                                     stage1_checkpoint=s1, **common),
        "joint": TrainConfig(name="joint", strategy="joint", stage1_checkpoint=s1, **common),
        "yolo_scratch": TrainConfig(name="yolo_scratch", strategy="yolo_scratch", **common),
        "detr_pretrain": TrainConfig(name="detr_pretrain", strategy="detr_pretrain", **common),
    }


def run_dir(root: Path, cfg: TrainConfig) -> Path:
    return Path(root) / f"{cfg.name}-{cfg.hash()}"


def cached(root: Path, cfg: TrainConfig) -> dict | None:
    done = run_dir(root, cfg) / "result.json"
    return json.loads(done.read_text()) if done.exists() else None


def ensure(root: Path, cfg: TrainConfig, data=None) -> dict:
    """Train ``cfg`` unless a finished result exists; returns the result summary."""
    hit = cached(root, cfg)
    if hit is not None:
        return hit
    out = run_dir(root, cfg)
    t0 = time.time()
    res = train_strategy(cfg, out, data)
    summary = {
        "name": cfg.name, "strategy": cfg.strategy, "config_hash": cfg.hash(), "final_ap50": res.final_ap50,
        "final_ap50_o2m": res.final_ap50_o2m, "seconds": round(time.time() - t0, 1),
        "stage1_ap50": _stage_final(res.metrics, "1"), "run_dir": str(out),
        "transfer": None if res.transfer is None else {
            "copied": res.transfer.copied, "fresh": res.transfer.fresh, "dropped": res.transfer.dropped,
            "copied_params": res.transfer.copied_params},
    }
    (out / "result.json").write_text(json.dumps(summary, indent=2))
    return summary


def _stage_final(rows, stage: str) -> float | None:
    vals = [float(r["ap50"]) for r in rows if r["stage"] == stage and r["ap50"] != ""]
    return vals[-1] if vals else None


def run_suite(root: Path | None = None, names=SUITE, **kw) -> dict[str, dict]:
    root = Path(root) if root is not None else runs_root() / "suite"
    cfgs = suite_configs(root, **kw)
    data = None
    results = {}
    for name in names:
        cfg = cfgs[name]
        if cached(root, cfg) is None and data is None:
            data = load_data(cfg)  # every suite config shares the default data
        results[name] = ensure(root, cfg, data)
        log.info("%s: final AP50 %.4f", name, results[name]["final_ap50"])
    return results


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description="train (or load) the strategy comparison suite")
    p.add_argument("--root", help="suite directory (default: $DEYO_RUNS_DIR/suite)")
    p.add_argument("--only", nargs="+", choices=SUITE)
    p.add_argument("--stage1-epochs", type=int, default=30)
    p.add_argument("--stage2-epochs", type=int, default=30)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    res = run_suite(args.root, args.only or SUITE, stage1_epochs=args.stage1_epochs,
                    stage2_epochs=args.stage2_epochs)
    print(json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
