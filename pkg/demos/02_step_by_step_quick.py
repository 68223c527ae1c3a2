"""A few-minute step-by-step run on small 64 px scenes.

Stage 1 trains the dense one-to-many detector, its backbone and neck move
into the end-to-end model, and stage 2 trains the query decoder on top.
The numbers are far from converged; the point is the mechanics.

Run: python demos/02_step_by_step_quick.py [out_dir]
"""
import sys
from pathlib import Path

from deyo.trainer import TrainConfig, train_strategy

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo_quick")

cfg = TrainConfig(
    name="demo_quick",
    strategy="step_by_step",
    data={"spec": {"image_size": 64, "objects_per_image": (1, 4)}, "n_train": 256, "n_val": 64},
    stage1_epochs=4,
    stage2_epochs=4,
)
res = train_strategy(cfg, out)

# %% what moved across the stage boundary
t = res.transfer
print(f"transfer: {t.copied} tensors copied ({t.copied_params} params), "
      f"{t.fresh} initialised fresh, {t.dropped} dropped (dense head)")

# %% per-epoch metrics, one row per stage and epoch
print(f"{'stage':>5} {'epoch':>5} {'loss':>8} {'AP50':>6}")
for row in res.metrics:
    loss = float(row["loss_total"]) if row["loss_total"] != "" else float("nan")
    ap = float(row["ap50"]) if row["ap50"] != "" else float("nan")
    print(f"{row['stage']:>5} {row['epoch']:>5} {loss:8.4f} {ap:6.3f}")

print("final end-to-end AP50", round(res.final_ap50, 4))
print("metrics + checkpoints in", out)
# try: deyo eval --checkpoint runs/demo_quick/checkpoints/stage2.safetensors --data <val dir>
