"""Synthetic shapes detection data: generation, on-disk format and augmentation.

Scenes contain filled circles, squares and triangles (classes 0, 1, 2) drawn
with random colors on a noisy background. Boxes are normalized center-format
``(cx, cy, w, h)`` throughout the package.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SHAPE_NAMES = ("circle", "square", "triangle")
GRAY = 114
MAX_STRIDE = 32


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    def xyxy(self, clamp: bool = True) -> tuple[float, float, float, float]:
        x0, y0 = self.cx - self.w / 2, self.cy - self.h / 2
        x1, y1 = self.cx + self.w / 2, self.cy + self.h / 2
        if clamp:
            x0, y0, x1, y1 = (min(max(v, 0.0), 1.0) for v in (x0, y0, x1, y1))
        return x0, y0, x1, y1

    def is_valid(self) -> bool:
        return 0 <= self.cx <= 1 and 0 <= self.cy <= 1 and 0 < self.w <= 1 and 0 < self.h <= 1


@dataclass
class GroundTruth:
    """Labels of one image. ``boxes`` is an (N, 4) float array of cxcywh rows."""

    boxes: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.class_ids):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.class_ids)} class ids")

    @property
    def crowd_density(self) -> int:
        return len(self.class_ids)

    def __len__(self) -> int:
        return len(self.class_ids)

    def box_list(self) -> list[Box]:
        return [Box(*map(float, b)) for b in self.boxes]

    def validate(self, num_classes: int) -> None:
        bad = sorted({int(c) for c in self.class_ids if not 0 <= c < num_classes})
        if bad:
            raise ValueError(f"invalid class ids {bad} (num_classes={num_classes})")
        for b in self.box_list():
            if not b.is_valid():
                raise ValueError(f"invalid box {tuple(b)}")

    def equals(self, other: "GroundTruth", atol: float = 1e-6) -> bool:
        return (
            len(self) == len(other)
            and np.array_equal(self.class_ids, other.class_ids)
            and np.allclose(self.boxes, other.boxes, atol=atol, rtol=0)
        )


@dataclass
class SceneSpec:
    image_size: int = 160
    num_classes: int = 3
    objects_per_image: tuple[int, int] = (1, 8)
    crowd_mode: bool = False
    seed: int = 0
    # object side length as a fraction of the image side
    object_scale: tuple[float, float] = (0.1, 0.28)

    def __post_init__(self):
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        self.object_scale = tuple(float(v) for v in self.object_scale)

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % MAX_STRIDE:
            raise ValueError(f"image_size must be a positive multiple of {MAX_STRIDE}, got {self.image_size}")
        lo, hi = self.objects_per_image
        if lo < 1 or hi < lo:
            raise ValueError(f"objects_per_image must satisfy 1 <= min <= max, got {self.objects_per_image}")
        if not 1 <= self.num_classes <= len(SHAPE_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(SHAPE_NAMES)}], got {self.num_classes}")
        s0, s1 = self.object_scale
        if not 0 < s0 <= s1 < 1:
            raise ValueError(f"bad object_scale {self.object_scale}")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        spec = cls(**d)
        spec.validate()
        return spec


class _Shape(NamedTuple):
    kind: int
    x: float  # center, pixels
    y: float
    size: float  # side / diameter, pixels
    color: tuple[int, int, int]


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def shape_mask(shape: _Shape, image_size: int) -> np.ndarray:
    c = np.arange(image_size) + 0.5
    X, Y = np.meshgrid(c, c)
    r = shape.size / 2
    dx, dy = X - shape.x, Y - shape.y
    if shape.kind == 0:
        return dx * dx + dy * dy <= r * r
    if shape.kind == 1:
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # upright isosceles triangle: apex at top, base at bottom
    inside_y = (dy <= r) & (dy >= -r)
    half_width = (dy + r) / 2
    return inside_y & (np.abs(dx) <= half_width)


def _pixel_iou(a: _Shape, b: _Shape) -> float:
    ra, rb = a.size / 2, b.size / 2
    iw = min(a.x + ra, b.x + rb) - max(a.x - ra, b.x - rb)
    ih = min(a.y + ra, b.y + rb) - max(a.y - ra, b.y - rb)
    inter = max(iw, 0) * max(ih, 0)
    return inter / (a.size**2 + b.size**2 - inter)


def layout_scene(spec: SceneSpec, index: int) -> tuple[np.random.Generator, list[_Shape]]:
    """Sample object placements for scene ``index``; returns the rng for rendering."""
    spec.validate()
    if index < 0:
        raise ValueError(f"index must be >= 0, got {index}")
    rng = scene_rng(spec.seed, index)
    n = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    S = spec.image_size
    shapes: list[_Shape] = []
    for _ in range(n):
        kind = int(rng.integers(spec.num_classes))
        color = tuple(int(v) for v in rng.integers(110, 256, size=3))
        cand = None
        if spec.crowd_mode and shapes and rng.random() < 0.5:
            # dense scene: overlap an existing object heavily (IoU ~0.4-0.75)
            ref = shapes[int(rng.integers(len(shapes)))]
            size = ref.size * rng.uniform(0.9, 1.1)
            shift = rng.uniform(0.12, 0.35, size=2) * ref.size * rng.choice([-1, 1], size=2)
            x = float(np.clip(ref.x + shift[0], size / 2, S - size / 2))
            y = float(np.clip(ref.y + shift[1], size / 2, S - size / 2))
            cand = _Shape(kind, x, y, size, color)
        else:
            for _attempt in range(30):
                size = rng.uniform(*spec.object_scale) * S
                x = rng.uniform(size / 2, S - size / 2)
                y = rng.uniform(size / 2, S - size / 2)
                cand = _Shape(kind, float(x), float(y), float(size), color)
                if all(_pixel_iou(cand, s) < 0.1 for s in shapes):
                    break
        shapes.append(cand)
    return rng, shapes


def _mask_box(mask: np.ndarray) -> Box:
    S = mask.shape[0]
    ys, xs = np.nonzero(mask)
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return Box((x0 + x1) / (2 * S), (y0 + y1) / (2 * S), (x1 - x0) / S, (y1 - y0) / S)


def generate_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, GroundTruth]:
    """Render scene ``index``: a (S, S, 3) uint8 image and its labels.

    Pure in ``(spec, index)``; boxes tightly bound each shape's full pixel mask.
    """
    rng, shapes = layout_scene(spec, index)
    S = spec.image_size
    base = rng.integers(30, 90, size=3)
    img = np.empty((S, S, 3), dtype=np.float64)
    img[:] = base
    img += rng.normal(0, 8, size=img.shape)
    boxes, labels = [], []
    for shp in shapes:
        m = shape_mask(shp, S)
        img[m] = np.asarray(shp.color) + rng.normal(0, 6, size=(int(m.sum()), 3))
        boxes.append(tuple(_mask_box(m)))
        labels.append(shp.kind)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img, GroundTruth(np.asarray(boxes), np.asarray(labels))


# ---------------------------------------------------------------- disk format


@dataclass
class DetectionDataset(Sequence):
    """Read-only dataset directory; images load lazily."""

    root: Path
    spec: SceneSpec | None
    image_ids: list[int]
    files: dict[int, str]
    labels: dict[int, GroundTruth]
    num_classes: int
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.image_ids)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        iid = self.image_ids[i]
        return self.load_image(iid), self.labels[iid]

    def load_image(self, image_id: int) -> np.ndarray:
        with Image.open(self.root / self.files[image_id]) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)

    def __iter__(self) -> Iterator[tuple[np.ndarray, GroundTruth]]:
        for i in range(len(self)):
            yield self[i]

    def to_memory(self) -> "ArrayDataset":
        return ArrayDataset(np.stack([self.load_image(i) for i in self.image_ids]),
                            dict(self.labels), list(self.image_ids), self.num_classes, self.spec)


@dataclass
class ArrayDataset(Sequence):
    """Decoded images held in one (N, H, W, 3) uint8 array."""

    images: np.ndarray
    labels: dict[int, GroundTruth]
    image_ids: list[int]
    num_classes: int
    spec: SceneSpec | None = None

    def __len__(self) -> int:
        return len(self.image_ids)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return self.images[i], self.labels[self.image_ids[i]]

    def subset(self, indices) -> "ArrayDataset":
        idx = [int(i) for i in indices]
        ids = [self.image_ids[i] for i in idx]
        return ArrayDataset(self.images[idx], {i: self.labels[i] for i in ids}, ids, self.num_classes, self.spec)

    @classmethod
    def generate(cls, spec: SceneSpec, n: int, start: int = 0) -> "ArrayDataset":
        """Render scenes ``start .. start + n - 1`` without touching disk."""
        spec.validate()
        items = [generate_scene(spec, i) for i in range(start, start + n)]
        ids = list(range(start, start + n))
        return cls(np.stack([im for im, _ in items]), {i: g for i, (_, g) in zip(ids, items)}, ids,
                   spec.num_classes, spec)


def write_dataset(spec: SceneSpec, n: int, out_dir: str | os.PathLike, start: int = 0) -> Path:
    """Render ``n`` scenes into ``out_dir``; returns the manifest path."""
    spec.validate()
    if n <= 0:
        raise ValueError(f"refusing to write an empty dataset (n={n})")
    root = Path(out_dir)
    if (root / "annotations.json").exists():
        log.warning("overwriting existing dataset in %s", root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, anns = [], []
    for index in range(start, start + n):
        img, gt = generate_scene(spec, index)
        fname = f"images/{index:06d}.png"
        Image.fromarray(img).save(root / fname)
        images.append({"id": index, "file": fname, "width": spec.image_size, "height": spec.image_size})
        for c, b in zip(gt.class_ids, gt.boxes):
            anns.append({"image_id": index, "class_id": int(c), "box": [float(v) for v in b]})
    doc = {
        "images": images,
        "annotations": anns,
        "categories": [{"id": i, "name": SHAPE_NAMES[i]} for i in range(spec.num_classes)],
    }
    (root / "annotations.json").write_text(json.dumps(doc))
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({"spec": asdict(spec), "n": n, "start": start}, indent=2))
    return manifest


def read_dataset(data_dir: str | os.PathLike) -> DetectionDataset:
    root = Path(data_dir)
    ann_path = root / "annotations.json"
    if not ann_path.exists():
        raise FileNotFoundError(f"no annotations.json in {root}")
    doc = json.loads(ann_path.read_text())
    if not doc.get("images"):
        raise ValueError(f"dataset {root} contains no images")
    spec = None
    if (root / "manifest.json").exists():
        spec = SceneSpec(**json.loads((root / "manifest.json").read_text())["spec"])
    if "categories" in doc:
        num_classes = len(doc["categories"])
    elif spec is not None:
        num_classes = spec.num_classes
    else:
        num_classes = len(SHAPE_NAMES)

    per_image: dict[int, list] = {int(im["id"]): [] for im in doc["images"]}
    bad_classes = set()
    for a in doc["annotations"]:
        iid = int(a["image_id"])
        if iid not in per_image:
            raise ValueError(f"annotation refers to unknown image id {iid}")
        if not 0 <= int(a["class_id"]) < num_classes:
            bad_classes.add(int(a["class_id"]))
        per_image[iid].append(a)
    if bad_classes:
        raise ValueError(f"unknown class_id(s) {sorted(bad_classes)} (num_classes={num_classes})")

    labels, files = {}, {}
    for im in doc["images"]:
        iid = int(im["id"])
        if not per_image[iid]:
            raise ValueError(f"missing annotation for image id {iid}")
        if not (root / im["file"]).exists():
            raise FileNotFoundError(f"image file for id {iid} not found: {im['file']}")
        files[iid] = im["file"]
        rows = per_image[iid]
        labels[iid] = GroundTruth([r["box"] for r in rows], [r["class_id"] for r in rows])
    return DetectionDataset(root, spec, sorted(files), files, labels, num_classes)


# --------------------------------------------------------------- augmentation


def _finish_boxes(xyxy: np.ndarray, labels: np.ndarray, size: int) -> GroundTruth:
    """Clip pixel-space xyxy boxes to the image, drop degenerate ones."""
    xyxy = np.clip(xyxy, 0, size)
    w = xyxy[:, 2] - xyxy[:, 0]
    h = xyxy[:, 3] - xyxy[:, 1]
    keep = (w >= 1.0) & (h >= 1.0)
    xyxy, labels = xyxy[keep], labels[keep]
    cxcywh = np.stack(
        [(xyxy[:, 0] + xyxy[:, 2]) / 2, (xyxy[:, 1] + xyxy[:, 3]) / 2, xyxy[:, 2] - xyxy[:, 0], xyxy[:, 3] - xyxy[:, 1]],
        axis=1,
    ) / size
    return GroundTruth(cxcywh.reshape(-1, 4), labels)


def _to_xyxy_px(gt: GroundTruth, size: int) -> np.ndarray:
    b = gt.boxes
    return np.stack([b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2, b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2], 1) * size


def _resize(img: np.ndarray, w: int, h: int) -> np.ndarray:
    return np.asarray(Image.fromarray(img).resize((w, h), Image.BILINEAR))


def hflip(img: np.ndarray, gt: GroundTruth) -> tuple[np.ndarray, GroundTruth]:
    boxes = gt.boxes.copy()
    boxes[:, 0] = 1.0 - boxes[:, 0]
    return np.ascontiguousarray(img[:, ::-1]), GroundTruth(boxes, gt.class_ids.copy())


def mosaic(items: Sequence[tuple[np.ndarray, GroundTruth]]) -> tuple[np.ndarray, GroundTruth]:
    """Tile four images at half resolution into a 2x2 composite."""
    if len(items) != 4:
        raise ValueError("mosaic needs exactly 4 images")
    S = items[0][0].shape[0]
    half = S // 2
    out = np.empty((S, S, 3), dtype=np.uint8)
    boxes, labels = [], []
    for k, (img, gt) in enumerate(items):
        oy, ox = (k // 2) * half, (k % 2) * half
        out[oy : oy + half, ox : ox + half] = _resize(img, half, half)
        xyxy = _to_xyxy_px(gt, S) / 2 + np.array([ox, oy, ox, oy])
        boxes.append(xyxy)
        labels.append(gt.class_ids)
    return out, _finish_boxes(np.concatenate(boxes), np.concatenate(labels), S)


def _zoom_out_gray(img, gt, rng):
    S = img.shape[0]
    scale = rng.uniform(0.6, 1.0)
    n = max(int(round(S * scale)), 1)
    ox, oy = (int(v) for v in rng.integers(0, S - n + 1, size=2))
    canvas = np.full_like(img, GRAY)
    canvas[oy : oy + n, ox : ox + n] = _resize(img, n, n)
    xyxy = _to_xyxy_px(gt, S) * (n / S) + np.array([ox, oy, ox, oy])
    return canvas, _finish_boxes(xyxy, gt.class_ids, S)


def _translate_gray(img, gt, rng, frac=0.1):
    S = img.shape[0]
    dx, dy = (int(v) for v in rng.integers(-int(frac * S), int(frac * S) + 1, size=2))
    out = np.full_like(img, GRAY)
    src = img[max(0, -dy) : S - max(0, dy), max(0, -dx) : S - max(0, dx)]
    out[max(0, dy) : max(0, dy) + src.shape[0], max(0, dx) : max(0, dx) + src.shape[1]] = src
    xyxy = _to_xyxy_px(gt, S) + np.array([dx, dy, dx, dy])
    return out, _finish_boxes(xyxy, gt.class_ids, S)


def _crop_resize(img, gt, rng, min_scale=0.8):
    # translate + resize without exposing any border
    S = img.shape[0]
    n = int(round(S * rng.uniform(min_scale, 1.0)))
    ox, oy = (int(v) for v in rng.integers(0, S - n + 1, size=2))
    out = _resize(np.ascontiguousarray(img[oy : oy + n, ox : ox + n]), S, S)
    xyxy = (_to_xyxy_px(gt, S) - np.array([ox, oy, ox, oy])) * (S / n)
    return out, _finish_boxes(xyxy, gt.class_ids, S)


def _color_jitter(img, rng):
    gain = rng.uniform(0.8, 1.2, size=3)
    bias = rng.uniform(-15, 15)
    return np.clip(img.astype(np.float32) * gain + bias, 0, 255).astype(np.uint8)


def augment(
    image: np.ndarray,
    gt: GroundTruth,
    policy: str,
    rng: np.random.Generator,
    mosaic_with: Sequence[tuple[np.ndarray, GroundTruth]] | None = None,
    mosaic_prob: float = 0.5,
) -> tuple[np.ndarray, GroundTruth]:
    """Stage-dependent augmentation.

    Both policies flip, translate and color-jitter. ``stage1`` additionally
    uses mosaic (when three extra samples are supplied) and gray border
    filling; ``stage2`` translates by crop-and-resize so no border is ever
    padded, and never builds mosaics.
    """
    if policy not in ("stage1", "stage2"):
        raise ValueError(f"unknown augmentation policy {policy!r}")
    img = image
    if policy == "stage1":
        if mosaic_with is not None and rng.random() < mosaic_prob:
            img, gt = mosaic([(img, gt), *mosaic_with])
        if rng.random() < 0.5:
            img, gt = _zoom_out_gray(img, gt, rng)
        img, gt = _translate_gray(img, gt, rng)
    else:
        img, gt = _crop_resize(img, gt, rng)
    if rng.random() < 0.5:
        img, gt = hflip(img, gt)
    img = _color_jitter(img, rng)
    return img, gt


def crop_dataset(spec: SceneSpec, n: int, crop: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Single-shape classification crops (a small stand-in for image-level pretraining)."""
    crops, labels = [], []
    sub = SceneSpec(image_size=crop, num_classes=spec.num_classes, objects_per_image=(1, 1),
                    seed=spec.seed + 7919, object_scale=(0.35, 0.8))
    for i in range(n):
        img, gt = generate_scene(sub, i)
        crops.append(img)
        labels.append(int(gt.class_ids[0]))
    return np.stack(crops), np.asarray(labels)
