"""Training loop: AdamW, per-epoch theta decay, min-val-loss checkpointing.

The configured batch size is always honored as the *gradient* batch; when
memory is tight the batch is processed in micro-batches whose losses are
scaled by micro/batch before backward, which reproduces the full-batch mean
exactly (all loss terms are means of per-sample values and the normalization
layers carry no batch statistics).

History goes to <out_dir>/history.jsonl, one record per epoch; when the
classifier is disabled the cls/accuracy fields are omitted from the records
entirely.  The best checkpoint (minimum validation loss; `select_on` picks
the full objective or the segmentation part only) is <out_dir>/best.ckpt.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import losses as L
from .losses import LossConfig
from .network import CamUNet, CamUNetConfig, init_params, save_checkpoint
from .sampling import read_manifest, load_cached_patch


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: CamUNetConfig = field(default_factory=CamUNetConfig)
    cache_manifest: str = ""
    val_manifest: str = ""
    out_dir: str = "runs/run0"
    micro_batch_size: int = 0      # 0 = auto from patch size
    grad_clip: float = 0.0         # 0 = off
    select_on: str = "total"       # "total" | "seg" validation loss for best-ckpt
    stop_at_train_dsc: float = 0.0  # >0: stop early once train DSC reaches this
    stop_at_cls_acc: float = 0.0    # paired with stop_at_train_dsc

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.model, dict):
            self.model = CamUNetConfig(**self.model)
        self.betas = tuple(self.betas)
        problems = self.validate()
        if problems:
            raise ValueError("invalid training config: " + "; ".join(problems))

    def validate(self):
        problems = []
        if self.lr <= 0:
            problems.append(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            problems.append(f"betas must be two values in [0,1), got {self.betas}")
        if self.select_on not in ("total", "seg"):
            problems.append(f"select_on must be 'total' or 'seg', got {self.select_on!r}")
        if self.micro_batch_size < 0:
            problems.append("micro_batch_size must be >= 0")
        return problems


@dataclass
class EpochRecord:
    epoch: int
    theta: float
    train_total: float
    train_focal: float
    train_dice: float
    val_total: float
    val_focal: float
    val_dice: float
    wall_time: float
    train_dsc: float = None
    train_cls: float = None
    val_cls: float = None
    val_cls_accuracy: float = None

    def to_json(self) -> str:
        d = asdict(self)
        if self.train_cls is None:
            for key in ("train_cls", "val_cls", "val_cls_accuracy"):
                d.pop(key)
        if self.train_dsc is None:
            d.pop("train_dsc")
        return json.dumps(d, sort_keys=True)


def _auto_micro(batch_size: int, patch_edge: int) -> int:
    # one 128-cube forward+backward already peaks >3 GB; stay at 1 there
    if patch_edge >= 96:
        micro = 1
    elif patch_edge >= 64:
        micro = 2
    else:
        micro = 8
    return max(1, min(micro, batch_size))


def _batch_tensors(records, manifest_path):
    xs, ms, ys = [], [], []
    for rec in records:
        x, m = load_cached_patch(manifest_path, rec)
        xs.append(x)
        ms.append(m.astype(np.float32))
        ys.append(float(rec["label"]))
    x = torch.from_numpy(np.stack(xs)).unsqueeze(1)
    m = torch.from_numpy(np.stack(ms))
    y = torch.tensor(ys, dtype=torch.float32)
    return x, m, y


def _forward_losses(model: CamUNet, x, m, y, cfg: LossConfig):
    out = model(x)
    focal = L.focal_loss(out.seg_probs, m, cfg.gamma)
    dice = L.dice_loss(out.seg_probs, m, cfg.eps)
    cls = L.bce_cls_loss(out.cls_prob, y) if out.cls_prob is not None else None
    return out, focal, dice, cls


def evaluate_epoch(model: CamUNet, manifest_path, loss_cfg: LossConfig, tau: int,
                   micro: int = 1, dsc_threshold: float = 0.5):
    """Validation pass: mean losses, patch DSC at 0.5, classifier accuracy.

    No parameter mutation; deterministic for fixed inputs.
    """
    records = read_manifest(manifest_path)
    model.eval()
    sums = {"focal": 0.0, "dice": 0.0, "cls": 0.0, "dsc": 0.0}
    cls_correct = 0
    has_cls = model.classifier is not None
    with torch.no_grad():
        for i in range(0, len(records), micro):
            chunk = records[i:i + micro]
            x, m, y = _batch_tensors(chunk, manifest_path)
            out, focal, dice, cls = _forward_losses(model, x, m, y, loss_cfg)
            n = len(chunk)
            sums["focal"] += float(focal) * n
            sums["dice"] += float(dice) * n
            pred = (out.seg_probs >= dsc_threshold).to(torch.float32)
            for b in range(n):
                inter = float((pred[b] * m[b]).sum())
                denom = float(pred[b].sum() + m[b].sum())
                sums["dsc"] += (2.0 * inter + 1e-5) / (denom + 1e-5)
            if has_cls:
                sums["cls"] += float(cls) * n
                cls_correct += int(((out.cls_prob >= 0.5).to(torch.float32) == y).sum())
    n = len(records)
    metrics = {
        "focal": sums["focal"] / n,
        "dice": sums["dice"] / n,
        "dsc": sums["dsc"] / n,
        "cls": sums["cls"] / n if has_cls else None,
        "cls_accuracy": cls_correct / n if has_cls else None,
    }
    theta = L.theta(tau, loss_cfg.schedule)
    metrics["seg_total"] = loss_cfg.alpha1 * metrics["focal"] + loss_cfg.alpha2 * metrics["dice"]
    metrics["total"] = metrics["seg_total"] + (theta * metrics["cls"] if has_cls else 0.0)
    return metrics


def train(config: TrainConfig):
    """Run the full loop; returns (best_checkpoint_path, history)."""
    records = read_manifest(config.cache_manifest)
    val_path = config.val_manifest or config.cache_manifest
    os.makedirs(config.out_dir, exist_ok=True)
    history_path = os.path.join(config.out_dir, "history.jsonl")
    best_path = os.path.join(config.out_dir, "best.ckpt")

    if config.loss.schedule.total_epochs < config.epochs:
        raise ValueError("theta schedule shorter than training run")
    torch.manual_seed(config.seed)
    model = init_params(config.model, config.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr,
                                  betas=config.betas,
                                  weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    micro = config.micro_batch_size or _auto_micro(config.batch_size,
                                                   config.model.patch_edge)
    B = config.batch_size
    history = []
    best_val = float("inf")
    has_cls = config.model.classifier_enabled

    with open(history_path, "w") as hist_file:
        for tau in range(config.epochs):
            t0 = time.time()
            theta = L.theta(tau, config.loss.schedule)
            order = rng.permutation(len(records))
            model.train()
            ep = {"focal": 0.0, "dice": 0.0, "cls": 0.0, "total": 0.0}
            seen = 0
            for bstart in range(0, len(records), B):
                idx = order[bstart:bstart + B]
                batch = [records[i] for i in idx]
                optimizer.zero_grad()
                bsums = {"focal": 0.0, "dice": 0.0, "cls": 0.0}
                for mstart in range(0, len(batch), micro):
                    chunk = batch[mstart:mstart + micro]
                    x, m, y = _batch_tensors(chunk, config.cache_manifest)
                    _, focal, dice, cls = _forward_losses(model, x, m, y, config.loss)
                    total, _ = L.total_loss((focal, dice), cls, tau, config.loss)
                    scale = len(chunk) / len(batch)
                    (total * scale).backward()
                    bsums["focal"] += float(focal.detach()) * len(chunk)
                    bsums["dice"] += float(dice.detach()) * len(chunk)
                    if cls is not None:
                        bsums["cls"] += float(cls.detach()) * len(chunk)
                if config.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                n = len(batch)
                for key in ("focal", "dice", "cls"):
                    ep[key] += bsums[key]
                ep["total"] += (config.loss.alpha1 * bsums["focal"]
                                + config.loss.alpha2 * bsums["dice"]
                                + theta * bsums["cls"])
                seen += n
                if not np.isfinite(ep["total"]):
                    hist_file.write(json.dumps({"epoch": tau, "aborted": True,
                                                "reason": "non-finite loss"}) + "\n")
                    raise FloatingPointError(f"non-finite training loss at epoch {tau}")

            val = evaluate_epoch(model, val_path, config.loss, tau, micro)
            if val_path == config.cache_manifest:
                train_dsc = val["dsc"]
            elif config.stop_at_train_dsc > 0:
                train_dsc = evaluate_epoch(model, config.cache_manifest,
                                           config.loss, tau, micro)["dsc"]
            else:
                train_dsc = None
            record = EpochRecord(
                epoch=tau, theta=theta,
                train_total=ep["total"] / seen,
                train_focal=ep["focal"] / seen,
                train_dice=ep["dice"] / seen,
                val_total=val["total"], val_focal=val["focal"], val_dice=val["dice"],
                wall_time=time.time() - t0,
                train_dsc=train_dsc,
                train_cls=(ep["cls"] / seen) if has_cls else None,
                val_cls=val["cls"], val_cls_accuracy=val["cls_accuracy"],
            )
            history.append(record)
            hist_file.write(record.to_json() + "\n")
            hist_file.flush()

            selection = val["total"] if config.select_on == "total" else val["seg_total"]
            if selection < best_val:
                best_val = selection
                save_checkpoint(model, best_path,
                                extra={"epoch": tau, "val_loss": best_val,
                                       "select_on": config.select_on})

            if config.stop_at_train_dsc > 0 and train_dsc is not None \
                    and train_dsc >= config.stop_at_train_dsc:
                acc_ok = (not has_cls or config.stop_at_cls_acc <= 0
                          or (record.val_cls_accuracy or 0) >= config.stop_at_cls_acc)
                if acc_ok:
                    break
    return best_path, history
