"""NMS against the one-to-one query filter.

NMS does pairwise overlap work, so its cost follows how crowded the scene
is. The query filter only thresholds and sorts scores.

Run: python demos/04_postprocessing.py
"""
import numpy as np

from deyo import evalkit
from deyo.evalkit import synthetic_detections
from deyo.match import Detections, nms, query_filter

# %% same inputs, two post-processors
d = synthetic_detections(100, np.random.default_rng(0))
print("nms keeps", len(nms(d, 0.65)), "| query filter keeps", len(query_filter(d, 0.25, 100)))

# %% latency across densities; cv_across = std/mean of the per-density means
rep = evalkit.latency_stability(reps=100)
print(f"{'method':<13}" + "".join(f"{'ms@' + str(n):>9}" for n in rep.densities) + f"{'cv_across':>11}")
for m, r in rep.methods.items():
    print(f"{m:<13}" + "".join(f"{1e3 * v:9.3f}" for v in r["mean"]) + f"{r['cv_across']:11.3f}")

# %% ideal rescoring: the headroom left in the scores alone
gts = {0: (np.array([0, 1]), np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]]))}
dets = Detections(np.array([[0.31, 0.3, 0.2, 0.2], [0.7, 0.69, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]]),
                  np.array([0.2, 0.9, 0.95]), np.array([0, 1, 0]), np.zeros(3, int))
for name, fn in [("plain", lambda x, g: x), ("ideal", evalkit.ideal_rescore), ("ideal+", evalkit.ideal_plus_rescore)]:
    print(f"{name:<7} AP50 {evalkit.evaluate(fn(dets, gts), gts).ap50:.3f}")
