"""Strategy comparison on the default scenes, read from the suite cache.

Train the suite first (hours on one CPU core, cached per config hash):

    python -m deyo.experiments --root runs/suite

then: python demos/03_strategy_suite.py [suite_root]
"""
import sys
from pathlib import Path

from deyo import cli, evalkit
from deyo.experiments import SUITE, cached, run_dir, suite_configs
from deyo.trainer import CheckpointArchive, load_data

root = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/suite")
cfgs = suite_configs(root)
done = {n: cached(root, c) for n, c in cfgs.items()}
missing = [n for n in SUITE if done[n] is None]
if missing:
    sys.exit(f"not trained yet: {missing}; run python -m deyo.experiments --root {root}")

# %% final AP50 of the one-to-one branch, equal epoch budgets
print(f"{'run':<15} {'AP50':>7} {'stage-1 dense':>14} {'minutes':>8}")
for n in SUITE:
    r = done[n]
    s1 = "" if r["stage1_ap50"] is None else f"{r['stage1_ap50']:.4f}"
    print(f"{n:<15} {r['final_ap50']:7.4f} {s1:>14} {r['seconds'] / 60:8.1f}")
print("joint, dense head kept alongside:", round(done["joint"]["final_ap50_o2m"], 4))

# %% AP50 against epoch for every run, as a chart and a tidy CSV
cli.main(["compare", "--runs", *[str(run_dir(root, cfgs[n])) for n in SUITE], "--out", str(root / "compare.png")])

# %% low-score padded queries barely matter: drop them and re-evaluate
model = CheckpointArchive.load(run_dir(root, cfgs["step_by_step"]) / "checkpoints" / "stage2.safetensors").build_model()
_, val = load_data(cfgs["step_by_step"])
rep = evalkit.padded_query_analysis(model, val, pad_threshold=0.05)
print(f"padded {rep.num_padded}/{rep.num_queries} queries; AP50 {rep.ap50_full:.4f} -> {rep.ap50_removed:.4f}")
