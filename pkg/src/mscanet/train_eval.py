"""Training loop (MSE on probabilities, Adam, per-epoch cosine annealing) and evaluation."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import SegmentationSample, crop_to, pad_to_multiple, random_flip
from .errors import ConfigError, NumericError
from .metrics import DEFAULT_DIST_PX, DEFAULT_THRESHOLD, MetricReport, compute_report
from .network import MSCANet, OPTIM_FILE, save_checkpoint

log = logging.getLogger(__name__)

TRAIN_LOG = "train_log.csv"
TRAIN_LOG_HEADER = ("epoch", "lr", "loss")


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 16
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 50
    augment: bool = False

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"training.{name} must be a positive integer, got {getattr(self, name)}")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError(f"training needs 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"training.{name} must lie in (0, 1), got {getattr(self, name)}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def resolve_device(name: str | None = None) -> torch.device:
    """``name``, else ``$MSCANET_DEVICE``, else CPU."""
    return torch.device(name or os.environ.get("MSCANET_DEVICE") or "cpu")


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Cosine-annealed learning rate, ``lr_max`` at epoch 0 and ``lr_min`` at ``cfg.epochs``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    # written as a convex combination so both endpoints are exact in floating point
    w = 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
    return cfg.lr_min * (1.0 - w) + cfg.lr_max * w


def mse_loss(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error between probabilities and a binary mask.

    ``valid`` (same shape, 0/1) restricts the mean to un-padded pixels.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(gt.shape)}")
    gt = gt.to(pred.dtype)
    if valid is None:
        return F.mse_loss(pred, gt)
    valid = valid.to(pred.dtype)
    return ((pred - gt) ** 2 * valid).sum() / valid.sum()


def _stack(samples: Sequence[SegmentationSample], divisor: int, rng: np.random.Generator | None = None):
    """Pad a batch to one common shape. Returns (images, masks, valid), each (B, 1, H, W)."""
    h = max(s.shape[0] for s in samples)
    w = max(s.shape[1] for s in samples)
    h, w = -(-h // divisor) * divisor, -(-w // divisor) * divisor
    imgs = np.zeros((len(samples), 1, h, w), dtype=np.float32)
    msks = np.zeros_like(imgs)
    valid = np.zeros_like(imgs)
    for i, s in enumerate(samples):
        image, mask = s.image, s.mask
        if rng is not None:
            image, mask = random_flip(image, mask, rng)
        sh, sw = image.shape
        imgs[i, 0, :sh, :sw] = image
        msks[i, 0, :sh, :sw] = mask
        valid[i, 0, :sh, :sw] = 1
    return torch.from_numpy(imgs), torch.from_numpy(msks), torch.from_numpy(valid)


def _append_log(path: Path, epoch: int, lr: float, loss: float) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow([epoch, repr(lr), repr(loss)])


def train(
    model: MSCANet,
    train_set: Sequence[SegmentationSample],
    cfg: TrainConfig,
    out_dir: str | Path,
    *,
    eval_set: Sequence[SegmentationSample] | None = None,
    eval_threshold: float = DEFAULT_THRESHOLD,
    dist_px: float = DEFAULT_DIST_PX,
    resume_from: str | Path | None = None,
    start_epoch: int = 0,
    device: str | torch.device | None = None,
    meta_extra: dict | None = None,
) -> Path:
    """Train ``model`` in place and return the final checkpoint directory.

    Runs ``cfg.epochs * ceil(n / batch_size)`` Adam steps (the last batch of an
    epoch may be partial). The learning rate is set once per epoch from
    :func:`cosine_lr`. One ``epoch,lr,loss`` row per epoch goes to
    ``out_dir/train_log.csv``; checkpoints go to ``out_dir/checkpoints``
    every ``cfg.checkpoint_every`` epochs and at the end (``final``). With an
    ``eval_set`` the checkpoint with the best mIoU is also kept as ``best``.

    When resuming, pass the checkpoint directory as ``resume_from`` and its
    recorded epoch as ``start_epoch``; the model must already hold its weights.
    """
    cfg.validate()
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if not 0 <= start_epoch <= cfg.epochs:
        raise ValueError(f"start_epoch {start_epoch} outside [0, {cfg.epochs}]")
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    out_dir.mkdir(parents=True, exist_ok=True)
    device = resolve_device(device) if not isinstance(device, torch.device) else device
    model.to(device)

    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(
        model.parameters(),
        lr=cosine_lr(start_epoch, cfg),
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
    )
    if resume_from is not None and (Path(resume_from) / OPTIM_FILE).is_file():
        opt.load_state_dict(torch.load(Path(resume_from) / OPTIM_FILE, map_location=device, weights_only=True))

    log_path = out_dir / TRAIN_LOG
    if start_epoch == 0 or not log_path.exists():
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(TRAIN_LOG_HEADER)

    seed = getattr(model, "seed", cfg.seed)
    meta = {"training": cfg.to_dict(), **(meta_extra or {})}
    divisor = model.cfg.divisor
    n = len(train_set)
    best_miou = -1.0
    final = ckpt_dir / "final"

    for epoch in range(start_epoch, cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        model.train()
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = [train_set[i] for i in order[start : start + cfg.batch_size]]
            images, masks, valid = _stack(batch, divisor, rng if cfg.augment else None)
            images, masks, valid = images.to(device), masks.to(device), valid.to(device)
            loss = mse_loss(model(images), masks, valid)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}: {value}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += value * len(batch)
            count += len(batch)
        mean_loss = total / count
        _append_log(log_path, epoch, lr, mean_loss)
        log.info("epoch %d lr %.3e loss %.6f", epoch, lr, mean_loss)

        done = epoch + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.epochs:
            metrics = {}
            if eval_set:
                report = evaluate(model, eval_set, eval_threshold, dist_px, device=device)
                metrics = report.to_dict()
                if report.miou > best_miou:
                    best_miou = report.miou
                    save_checkpoint(model, ckpt_dir / "best", seed=seed, epoch=done,
                                    metrics=metrics, optimizer=opt, extra=meta)
            path = ckpt_dir / ("final" if done == cfg.epochs else f"epoch_{done:04d}")
            save_checkpoint(model, path, seed=seed, epoch=done, metrics=metrics, optimizer=opt, extra=meta)

    if start_epoch == cfg.epochs:
        save_checkpoint(model, final, seed=seed, epoch=cfg.epochs, optimizer=opt, extra=meta)
    return final


@torch.no_grad()
def predict(
    model: MSCANet,
    samples: Sequence[SegmentationSample],
    batch_size: int = 8,
    device: str | torch.device | None = None,
) -> list[np.ndarray]:
    """Probability maps cropped back to each sample's original size."""
    device = resolve_device(device) if not isinstance(device, torch.device) else device
    model.to(device).eval()
    dtype = next(model.parameters()).dtype
    divisor = model.cfg.divisor
    out = []
    padded = [pad_to_multiple(s, divisor) for s in samples]
    # group equal shapes so batches stack without extra padding
    by_shape: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(padded):
        by_shape.setdefault(s.shape, []).append(i)
    results: dict[int, np.ndarray] = {}
    for idx in by_shape.values():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            x = torch.from_numpy(np.stack([padded[i].image for i in chunk])[:, None]).to(device, dtype)
            probs = model(x).cpu().numpy()[:, 0]
            for i, p in zip(chunk, probs):
                results[i] = crop_to(p, padded[i].orig_shape)
    for i in range(len(samples)):
        out.append(results[i])
    return out


def evaluate(
    model: MSCANet,
    test_set: Sequence[SegmentationSample],
    threshold: float = DEFAULT_THRESHOLD,
    dist_px: float = DEFAULT_DIST_PX,
    device: str | torch.device | None = None,
) -> MetricReport:
    if len(test_set) == 0:
        raise ValueError("evaluation set is empty")
    probs = predict(model, test_set, device=device)
    return compute_report(probs, [s.mask for s in test_set], threshold, dist_px)


def write_overlays(
    samples: Sequence[SegmentationSample],
    probs: Sequence[np.ndarray],
    threshold: float,
    out_dir: str | Path,
) -> None:
    """Save each input as RGB with the predicted contour in red and the ground truth in green."""
    from PIL import Image
    from skimage.segmentation import find_boundaries

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s, p in zip(samples, probs):
        gray = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
        rgb = np.repeat(gray[..., None], 3, axis=-1)
        rgb[find_boundaries(s.mask > 0, mode="outer")] = (0, 255, 0)
        rgb[find_boundaries(p > threshold, mode="outer")] = (255, 0, 0)
        Image.fromarray(rgb).save(out_dir / f"{s.id}.png")
