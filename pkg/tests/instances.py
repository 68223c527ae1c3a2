"""Randomized detection instances shared by the metric tests."""
import numpy as np

from deyo.match import Detections


def random_instance(rng, n_images=4, num_classes=3, max_gt=5, max_det=10):
    """GT boxes plus jittered copies, duplicates and clutter, so IoUs straddle 0.5."""
    gts, boxes, scores, classes, ids = {}, [], [], [], []
    for im in range(n_images):
        k = int(rng.integers(0, max_gt + 1))
        g_boxes = np.concatenate([rng.uniform(0.2, 0.8, (k, 2)), rng.uniform(0.08, 0.3, (k, 2))], 1)
        g_cls = rng.integers(0, num_classes, k)
        gts[im] = (g_cls, g_boxes)
        for _ in range(int(rng.integers(0, max_det + 1))):
            if k and rng.random() < 0.7:
                j = rng.integers(k)
                b = g_boxes[j] + rng.normal(0, 0.03, 4) * np.r_[1, 1, 0.5, 0.5]
                c = g_cls[j] if rng.random() < 0.8 else rng.integers(num_classes)
            else:
                b = np.r_[rng.uniform(0.2, 0.8, 2), rng.uniform(0.08, 0.3, 2)]
                c = rng.integers(num_classes)
            boxes.append(np.clip(b, 0.01, 0.99))
            scores.append(float(np.round(rng.uniform(0, 1), 2)))  # rounding forces score ties
            classes.append(int(c))
            ids.append(im)
    dets = Detections(np.reshape(boxes, (-1, 4)), scores, classes, ids)
    return dets, gts


def as_oracle(dets, gts):
    d = [(int(i), int(c), list(b), float(s)) for b, s, c, i in zip(dets.boxes, dets.scores, dets.class_ids, dets.image_ids)]
    g = {im: [(int(c), list(b)) for c, b in zip(*v)] for im, v in gts.items()}
    return d, g
