"""Training strategies, stage-1 -> stage-2 weight transfer and checkpoints.

Strategies (all share one detection-epoch budget, ``stage1_epochs + stage2_epochs``):

* ``yolo_scratch``   full detector from random init, one-to-one loss only
* ``detr_pretrain``  backbone from a classification pretraining, then one-to-one loss
* ``step_by_step``   dense one-to-many detector first, then transfer backbone+neck
                     and train the decoder
* ``joint``          step_by_step with the one-to-many loss kept in stage 2
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save
from torch import nn

from . import evalkit
from .dataio import ArrayDataset, SceneSpec, augment, crop_dataset, read_dataset
from .decoder import CDNConfig
from .losses import O2M_WEIGHTS, o2m_loss, total_loss
from .model import DEYO, target_list
from .nets import ModelScale, get_scale

log = logging.getLogger(__name__)

STRATEGIES = ("yolo_scratch", "detr_pretrain", "step_by_step", "joint")
METRIC_COLUMNS = (
    "epoch", "stage", "strategy", "steps", "loss_total", "loss_o2o", "loss_o2m",
    "loss_cls", "loss_l1", "loss_giou", "ap50", "ap", "ap75", "recall", "ap50_o2o", "ap50_o2m",
)


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: int, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at stage {stage}, epoch {epoch}, step {step}")
        self.stage, self.epoch, self.step, self.value = stage, epoch, step, value


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    name: str = "run"
    strategy: str = "step_by_step"
    data: dict = field(default_factory=lambda: {"spec": {}, "n_train": 2000, "n_val": 500})
    scale: str | dict = "N"
    seed: int = 0
    batch_size: int = 16
    stage1_epochs: int = 30
    stage2_epochs: int = 30
    lr: float = 1e-4
    backbone_lr: float = 1e-5
    weight_decay: float = 1e-4
    scratch_lr: float = 1e-3  # dense one-to-many training from random init
    cls_pretrain_epochs: int = 10
    cls_pretrain_images: int = 3000
    cdn_groups: int = 2
    transfer_neck: bool = True
    freeze_neck: bool = False
    o2m_weight: float = 1.0
    clip_grad_o2o: float = 0.1
    clip_grad_o2m: float = 10.0
    eval_every: int = 1
    eval_batch: int = 50
    stage1_checkpoint: str | None = None  # reuse an existing stage-1 archive

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        for k in ("stage1_epochs", "stage2_epochs", "batch_size"):
            if int(getattr(self, k)) < 1:
                raise ConfigError(f"{k} must be positive, got {getattr(self, k)}")
        for k in ("lr", "backbone_lr", "scratch_lr"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        if not isinstance(self.data, dict):
            raise ConfigError("data must be a mapping")
        if "train" in self.data or "val" in self.data:
            for k in ("train", "val"):
                if not self.data.get(k):
                    raise ConfigError(f"missing dataset path: data.{k}")
        elif "spec" not in self.data:
            raise ConfigError("missing dataset path: data.train (or data.spec for in-memory generation)")
        try:
            get_scale(self.scale)
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None

    @property
    def model_scale(self) -> ModelScale:
        return get_scale(self.scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.scale, ModelScale):
            d["scale"] = self.scale.to_dict()
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**d)


def load_data(cfg: TrainConfig) -> tuple[ArrayDataset, ArrayDataset]:
    d = cfg.data
    if "train" in d:
        for k in ("train", "val"):
            if not Path(d[k]).exists():
                raise ConfigError(f"data.{k} does not exist: {d[k]}")
        return read_dataset(d["train"]).to_memory(), read_dataset(d["val"]).to_memory()
    spec = SceneSpec.from_dict(d.get("spec", {}))
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    n_train, n_val = int(d.get("n_train", 2000)), int(d.get("n_val", 500))
    # validation scenes use indices after the training ones: a held-out split
    return ArrayDataset.generate(spec, n_train), ArrayDataset.generate(spec, n_val, start=n_train)


# ---------------------------------------------------------------- checkpoints


@dataclass
class CheckpointArchive:
    """Named tensors (``backbone.*``, ``neck.*``, ...) plus JSON metadata."""

    tensors: dict[str, torch.Tensor]
    meta: dict

    @classmethod
    def from_model(cls, model: nn.Module, **meta) -> "CheckpointArchive":
        tensors = {k: v.detach().clone().contiguous() for k, v in model.state_dict().items()}
        if isinstance(model, DEYO):
            meta.setdefault("scale", model.scale.to_dict())
            meta.setdefault("num_classes", model.num_classes)
            meta.setdefault("with_o2m", model.with_o2m)
            meta.setdefault("with_o2o", model.with_o2o)
        return cls(tensors, meta)

    def to_bytes(self) -> bytes:
        return st_save(self.tensors, metadata={"deyo": json.dumps(self.meta, sort_keys=True)})

    @classmethod
    def from_bytes(cls, data: bytes) -> "CheckpointArchive":
        header_len = int.from_bytes(data[:8], "little")
        header = json.loads(data[8 : 8 + header_len])
        meta = json.loads(header.get("__metadata__", {}).get("deyo", "{}"))
        return cls(dict(st_load(data)), meta)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CheckpointArchive":
        return cls.from_bytes(Path(path).read_bytes())

    def names(self, prefix: str | None = None) -> list[str]:
        if prefix is None:
            return sorted(self.tensors)
        return sorted(k for k in self.tensors if k.split(".", 1)[0] == prefix)

    def build_model(self) -> DEYO:
        m = self.meta
        try:
            model = DEYO(ModelScale.from_dict(m["scale"]), m["num_classes"], m["with_o2m"], m["with_o2o"])
        except KeyError as e:
            raise ConfigError(f"checkpoint metadata lacks {e.args[0]!r}") from None
        load_state(model, self.tensors)
        return model


def load_state(model: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    own = model.state_dict()
    missing = sorted(set(own) - set(tensors))
    extra = sorted(set(tensors) - set(own))
    if missing or extra:
        raise ConfigError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, v in tensors.items():
        if own[k].shape != v.shape:
            raise ConfigError(f"shape mismatch for {k}: checkpoint {tuple(v.shape)} vs model {tuple(own[k].shape)}")
    model.load_state_dict(tensors)


# ---------------------------------------------------------------- transfer


@dataclass
class TransferReport:
    copied: int  # entries
    fresh: int
    dropped: int
    copied_params: int  # elements
    copied_names: list[str] = field(repr=False, default_factory=list)


def transfer_weights(source: CheckpointArchive, model: DEYO, transfer_neck: bool = True,
                     copy_o2m: bool | None = None) -> TransferReport:
    """Copy ``backbone.*`` (and ``neck.*``) from ``source`` into ``model`` in place.

    ``o2m_head.*`` is copied when the target keeps a dense head (joint
    training) unless ``copy_o2m`` says otherwise. Every other target entry
    keeps its fresh initialization.
    """
    if copy_o2m is None:
        copy_o2m = model.with_o2m
    prefixes = {"backbone"} | ({"neck"} if transfer_neck else set()) | ({"o2m_head"} if copy_o2m else set())
    state = model.state_dict()
    wanted = [k for k in source.tensors if k.split(".", 1)[0] in prefixes]
    for k in wanted:
        if k not in state:
            raise ValueError(f"transfer entry {k} has no counterpart in the target model")
        if state[k].shape != source.tensors[k].shape:
            raise ValueError(f"shape mismatch transferring {k}: source {tuple(source.tensors[k].shape)}, "
                             f"target {tuple(state[k].shape)}")
    missing = [k for k in state if k.split(".", 1)[0] in prefixes and k not in source.tensors]
    if missing:
        raise ValueError(f"source checkpoint lacks {missing[0]} (and {len(missing) - 1} more)")
    with torch.no_grad():
        for k in wanted:
            state[k].copy_(source.tensors[k])
    copied = set(wanted)
    return TransferReport(
        copied=len(wanted),
        fresh=sum(1 for k in state if k not in copied),
        dropped=sum(1 for k in source.tensors if k not in copied),
        copied_params=sum(source.tensors[k].numel() for k in wanted),
        copied_names=sorted(wanted),
    )


# ---------------------------------------------------------------- data loop


def seeded(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def epoch_batches(data: ArrayDataset, cfg: TrainConfig, stage: int, epoch: int, policy: str | None):
    """Deterministic shuffled, augmented batches for one epoch."""
    order = seeded(cfg.seed, stage, epoch).permutation(len(data))
    bs = cfg.batch_size
    for b0 in range(0, len(order), bs):
        idx = order[b0 : b0 + bs]
        imgs, gts = [], []
        for i in idx:
            img, gt = data[int(i)]
            if policy is not None:
                rng = seeded(cfg.seed, stage, epoch, int(i), 1)
                extra = [data[int(j)] for j in rng.integers(0, len(data), 3)] if policy == "stage1" else None
                img, gt = augment(img, gt, policy, rng, mosaic_with=extra)
            imgs.append(img)
            gts.append(gt)
        x = torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2).float() / 255.0
        yield x, target_list(gts)


def _set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _check_finite(loss: torch.Tensor, stage: int, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(stage, epoch, step, float(loss))


def _mean(rows: list[dict]) -> dict:
    keys = rows[0].keys() if rows else []
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


class MetricsLog:
    """Per-epoch metrics rows, optionally mirrored to a CSV file."""

    def __init__(self, path: Path | None = None, strategy: str = ""):
        self.path = path
        self.strategy = strategy
        self.rows: list[dict] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as f:
                csv.DictWriter(f, METRIC_COLUMNS).writeheader()

    def add(self, **row) -> dict:
        full = {k: row.get(k, "") for k in METRIC_COLUMNS}
        full["strategy"] = self.strategy
        for k, v in full.items():
            if isinstance(v, float):
                full[k] = f"{v:.6f}"
        self.rows.append(full)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.DictWriter(f, METRIC_COLUMNS).writerow(full)
        return full

    @property
    def next_epoch(self) -> int:
        return len(self.rows) + 1


def read_metrics(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------- evaluation helpers


def eval_o2m(model: DEYO, val) -> evalkit.EvalReport:
    dets = evalkit.predict_dataset(model, val, branch="o2m")
    return evalkit.evaluate(dets, evalkit.dataset_gts(val))


def eval_o2o(model: DEYO, val, **kw) -> evalkit.EvalReport:
    dets = evalkit.predict_dataset(model, val, branch="o2o", **kw)
    return evalkit.evaluate(dets, evalkit.dataset_gts(val))


# ---------------------------------------------------------------- stages


def train_stage1(cfg: TrainConfig, train: ArrayDataset, val: ArrayDataset, metrics: MetricsLog | None = None,
                 num_classes: int | None = None) -> CheckpointArchive:
    """Dense one-to-many detector (backbone + neck + head) from scratch."""
    metrics = metrics or MetricsLog(strategy=cfg.strategy)
    _set_determinism(cfg.seed * 1000 + 1)
    model = DEYO(cfg.model_scale, num_classes or train.num_classes, with_o2m=True, with_o2o=False)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.scratch_lr, weight_decay=cfg.weight_decay)
    step = 0
    for epoch in range(1, cfg.stage1_epochs + 1):
        model.train()
        losses = []
        for x, gts in epoch_batches(train, cfg, 1, epoch, "stage1"):
            bundle = o2m_loss(model(x).o2m, gts)
            loss = bundle.total
            step += 1
            _check_finite(loss, 1, epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_grad_o2m)
            opt.step()
            losses.append({"total": float(loss.detach()), "o2m": float(bundle.o2m.detach())})
        row = {"epoch": metrics.next_epoch, "stage": 1, "steps": step,
               "loss_total": _mean(losses)["total"], "loss_o2m": _mean(losses)["o2m"]}
        if epoch % cfg.eval_every == 0 or epoch == cfg.stage1_epochs:
            rep = eval_o2m(model, val)
            row.update(ap50=rep.ap50, ap=rep.ap, ap75=rep.ap75, recall=rep.recall100, ap50_o2m=rep.ap50)
        log.info("stage1 epoch %d %s", epoch, row)
        metrics.add(**row)
    return CheckpointArchive.from_model(model, stage=1, epoch=cfg.stage1_epochs, seed=cfg.seed,
                                        config_hash=cfg.hash())


def param_groups(model: DEYO, cfg: TrainConfig, low_lr_prefixes) -> list[dict]:
    """Two AdamW groups: ``low_lr_prefixes`` at the backbone rate, the rest at the main rate."""
    low, high = [], []
    for name, p in model.named_parameters():
        prefix = name.split(".", 1)[0]
        if prefix == "neck" and cfg.freeze_neck:
            p.requires_grad_(False)
            continue
        (low if prefix in low_lr_prefixes else high).append(p)
    groups = [{"params": high, "lr": cfg.lr, "name": "main"}]
    if low:
        groups.append({"params": low, "lr": cfg.backbone_lr, "name": "backbone"})
    return groups


def train_stage2(cfg: TrainConfig, model: DEYO, train: ArrayDataset, val: ArrayDataset, mode: str,
                 low_lr_prefixes=("backbone", "neck"), metrics: MetricsLog | None = None,
                 epochs: int | None = None, stage: int = 2) -> CheckpointArchive:
    """End-to-end training with ``total_loss`` in ``mode`` (o2o_only | joint)."""
    metrics = metrics or MetricsLog(strategy=cfg.strategy)
    if mode == "joint" and not model.with_o2m:
        raise ConfigError("joint training needs a model with the one-to-many head")
    epochs = cfg.stage2_epochs if epochs is None else epochs
    _set_determinism(cfg.seed * 1000 + stage)
    opt = torch.optim.AdamW(param_groups(model, cfg, low_lr_prefixes), weight_decay=cfg.weight_decay)
    cdn_cfg = CDNConfig(groups=cfg.cdn_groups) if cfg.cdn_groups > 0 else None
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + stage)
    params = [p for g in opt.param_groups for p in g["params"]]
    step = 0
    for epoch in range(1, epochs + 1):
        model.train()
        losses = []
        for x, gts in epoch_batches(train, cfg, stage, epoch, "stage2"):
            out = model(x, gts, cdn_cfg, gen)
            bundle = total_loss(out.decoder, out.proposals, gts, mode, out.cdn,
                                out.o2m if mode == "joint" else None, o2m_weights=O2M_WEIGHTS,
                                o2m_scale=cfg.o2m_weight)
            loss = bundle.total
            step += 1
            _check_finite(loss, stage, epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            nn.utils.clip_grad_norm_(params, cfg.clip_grad_o2o)
            opt.step()
            t = bundle.terms
            losses.append({"total": float(loss.detach()), "o2o": float(bundle.o2o.detach()),
                           "o2m": float(bundle.o2m.detach()), "cls": float(t["cls"].detach()),
                           "l1": float(t["l1"].detach()), "giou": float(t["giou"].detach())})
        m = _mean(losses)
        row = {"epoch": metrics.next_epoch, "stage": stage, "steps": step, "loss_total": m["total"],
               "loss_o2o": m["o2o"], "loss_cls": m["cls"], "loss_l1": m["l1"], "loss_giou": m["giou"]}
        if mode == "joint":
            row["loss_o2m"] = m["o2m"]
        if epoch % cfg.eval_every == 0 or epoch == epochs:
            rep = eval_o2o(model, val)
            row.update(ap50=rep.ap50, ap=rep.ap, ap75=rep.ap75, recall=rep.recall100, ap50_o2o=rep.ap50)
            if mode == "joint":
                row["ap50_o2m"] = eval_o2m(model, val).ap50
        log.info("stage%d epoch %d %s", stage, epoch, row)
        metrics.add(**row)
    return CheckpointArchive.from_model(model, stage=stage, epoch=epochs, seed=cfg.seed, config_hash=cfg.hash(),
                                        mode=mode)


# ---------------------------------------------------------------- classification pretraining


class _Classifier(nn.Module):
    def __init__(self, scale: ModelScale, num_classes: int):
        super().__init__()
        from .nets import Backbone

        self.backbone = Backbone(scale)
        self.head = nn.Linear(scale.backbone_widths[-1], num_classes)

    def forward(self, x):
        return self.head(self.backbone(x)[-1].mean((2, 3)))


@dataclass
class PretrainResult:
    archive: CheckpointArchive
    accuracy: float  # held-out crops


def classification_pretrain(cfg: TrainConfig, num_classes: int = 3) -> PretrainResult:
    """Backbone + pooled linear head on single-shape crops; keeps ``backbone.*`` only."""
    n = cfg.cls_pretrain_images
    x_all, y_all = crop_dataset(SceneSpec(seed=cfg.seed, num_classes=num_classes), n + n // 5)
    x = torch.from_numpy(x_all).permute(0, 3, 1, 2).float() / 255.0
    y = torch.from_numpy(y_all).long()
    x_tr, y_tr, x_te, y_te = x[:n], y[:n], x[n:], y[n:]
    _set_determinism(cfg.seed * 1000 + 7)
    clf = _Classifier(cfg.model_scale, num_classes)
    opt = torch.optim.AdamW(clf.parameters(), lr=cfg.scratch_lr, weight_decay=cfg.weight_decay)
    bs = 64
    step = 0
    for epoch in range(1, cfg.cls_pretrain_epochs + 1):
        clf.train()
        order = seeded(cfg.seed, 7, epoch).permutation(n)
        for b0 in range(0, n, bs):
            idx = torch.from_numpy(order[b0 : b0 + bs])
            xb = x_tr[idx]
            if seeded(cfg.seed, 7, epoch, b0).random() < 0.5:
                xb = xb.flip(-1)
            loss = nn.functional.cross_entropy(clf(xb), y_tr[idx])
            step += 1
            _check_finite(loss, 0, epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    clf.eval()
    with torch.no_grad():
        acc = float((clf(x_te).argmax(1) == y_te).float().mean())
    tensors = {k: v.detach().clone().contiguous() for k, v in clf.state_dict().items() if k.startswith("backbone.")}
    meta = {"stage": 0, "task": "classification", "epoch": cfg.cls_pretrain_epochs, "seed": cfg.seed,
            "accuracy": acc, "scale": cfg.model_scale.to_dict(), "config_hash": cfg.hash()}
    return PretrainResult(CheckpointArchive(tensors, meta), acc)


# ---------------------------------------------------------------- strategies


@dataclass
class RunResult:
    strategy: str
    metrics: list[dict]
    checkpoints: dict[str, Path | CheckpointArchive]
    final_ap50: float
    transfer: TransferReport | None = None
    final_ap50_o2m: float | None = None


def _final(metrics: MetricsLog, col: str = "ap50") -> float:
    for row in reversed(metrics.rows):
        if row.get(col, "") != "":
            return float(row[col])
    return float("nan")


def train_strategy(cfg: TrainConfig, run_dir: str | os.PathLike | None = None, data=None) -> RunResult:
    """Run one strategy end to end; writes checkpoints and metrics under ``run_dir``."""
    cfg.validate()
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        (run / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    train, val = data if data is not None else load_data(cfg)
    C = train.num_classes
    metrics = MetricsLog(run / "metrics.csv" if run else None, cfg.strategy)
    ckpts: dict = {}

    def keep(tag: str, archive: CheckpointArchive):
        ckpts[tag] = archive.save(run / "checkpoints" / f"{tag}.safetensors") if run else archive

    transfer = None
    budget = cfg.stage1_epochs + cfg.stage2_epochs
    if cfg.strategy in ("step_by_step", "joint"):
        if cfg.stage1_checkpoint:
            s1 = CheckpointArchive.load(cfg.stage1_checkpoint)
            if s1.meta.get("stage") != 1:
                raise ConfigError(f"stage1_checkpoint is not a stage-1 archive: {cfg.stage1_checkpoint}")
            src_metrics = Path(cfg.stage1_checkpoint).parent.parent / "metrics.csv"
            if src_metrics.exists():
                for row in read_metrics(src_metrics):
                    if row["stage"] == "1":
                        metrics.add(**{k: row[k] for k in METRIC_COLUMNS if k != "strategy"})
        else:
            s1 = train_stage1(cfg, train, val, metrics, C)
        keep("stage1", s1)
        joint = cfg.strategy == "joint"
        model = DEYO(cfg.model_scale, C, with_o2m=joint, with_o2o=True)
        transfer = transfer_weights(s1, model, transfer_neck=cfg.transfer_neck)
        s2 = train_stage2(cfg, model, train, val, "joint" if joint else "o2o_only", metrics=metrics)
        keep("stage2", s2)
    elif cfg.strategy == "yolo_scratch":
        model = DEYO(cfg.model_scale, C, with_o2m=False, with_o2o=True)
        s2 = train_stage2(cfg, model, train, val, "o2o_only", low_lr_prefixes=(), metrics=metrics,
                          epochs=budget)
        keep("stage2", s2)
    elif cfg.strategy == "detr_pretrain":
        pre = classification_pretrain(cfg, C)
        keep("pretrain", pre.archive)
        model = DEYO(cfg.model_scale, C, with_o2m=False, with_o2o=True)
        transfer = transfer_weights(pre.archive, model, transfer_neck=False)
        s2 = train_stage2(cfg, model, train, val, "o2o_only", low_lr_prefixes=("backbone",), metrics=metrics,
                          epochs=budget)
        keep("stage2", s2)
    else:  # pragma: no cover - validate() rejects this
        raise ConfigError(cfg.strategy)
    o2m = _final(metrics, "ap50_o2m") if cfg.strategy == "joint" else None
    return RunResult(cfg.strategy, metrics.rows, ckpts, _final(metrics), transfer, o2m)


def runs_root() -> Path:
    return Path(os.environ.get("DEYO_RUNS_DIR", "runs"))
