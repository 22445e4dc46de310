"""SGD training loop: momentum, weight decay, polynomial LR decay.

The loop is deterministic for a fixed config and platform. Randomness flows
through three generators derived from the run seed: parameter init uses the
seed directly, batch order uses [seed, 0], and augmentation uses
[seed, 1, aug.rng_seed]. Draw order per epoch is the permutation first, then
each batch's augmentation draws in batch order, so logs and checkpoints are
byte-identical across runs.

Checkpoint selection scores a held-out fraction of the training slices after
every epoch with the stacked-volume mean Dice (foreground classes present in
the held-out ground truth) and keeps the strictly best epoch as best.jckp.
With val_fraction 0 every slice trains and best.jckp tracks the last epoch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import CutMixRecord, augment_batch
from .config import RunConfig, save_resolved
from .data_io import load_scan, load_split, save_checkpoint
from .errors import ConfigError, NumericError
from .metrics import MetricReport, aggregate_reports, evaluate_volume
from .network import ModelState, build_model, loss as loss_fn, predict_labels
from .network import forward
from .tensor import Tape, Tensor, backward

MOMENTUM = 0.9
WEIGHT_DECAY = 1e-4
POLY_POWER = 0.9
VAL_FRACTION = 0.10
LOG_HEADER = ("epoch", "iter", "loss", "lr")


def poly_lr(base_lr: float, iteration: int, max_iter: int,
            power: float = POLY_POWER) -> float:
    """LR for a 0-based iteration; stays positive through the last step."""
    if not 0 <= iteration < max_iter:
        raise ConfigError(f"iteration {iteration} outside [0, {max_iter})")
    return float(base_lr * (1.0 - iteration / max_iter) ** power)


def sgd_step(m: ModelState, velocities: dict[str, np.ndarray], lr: float,
             momentum: float = MOMENTUM,
             weight_decay: float = WEIGHT_DECAY) -> None:
    for name, t in m.params.items():
        g = t.grad
        if g is None:
            raise NumericError(f"parameter {name} has no gradient")
        v = velocities[name]
        v *= momentum
        v += g
        v += weight_decay * t.data
        t.data -= lr * v


@dataclass
class SlicePool:
    images: np.ndarray  # (N, 1, H, W) float32
    labels: np.ndarray  # (N, H, W) uint8
    source: list[tuple[int, int]]  # (scan_id, slice index) per row


def load_pool(data_dir, scan_ids) -> SlicePool:
    images, labels, source = [], [], []
    for sid in scan_ids:
        scan = load_scan(data_dir, sid)
        for idx, sl in enumerate(scan.slices):
            images.append(sl.image)
            labels.append(sl.label)
            source.append((sid, idx))
    if not images:
        raise ConfigError(f"no slices found under {data_dir}")
    return SlicePool(images=np.stack(images).astype(np.float32),
                     labels=np.stack(labels).astype(np.uint8),
                     source=source)


def _batch_plan(n: int, batch_size: int) -> list[tuple[int, int]]:
    """Contiguous [start, stop) chunks over a permutation; a trailing
    single-slice chunk is dropped because CutMix needs two images."""
    spans = []
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        if stop - start >= 2 or batch_size == 1:
            spans.append((start, stop))
    return spans


@dataclass
class TrainResult:
    model: ModelState
    log_path: Path
    best_path: Path
    best_epoch: int
    best_val_dice: float
    losses: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)
    records: list[CutMixRecord] = field(default_factory=list)


def _predict_pool(m: ModelState, images: np.ndarray,
                  batch_size: int) -> np.ndarray:
    preds = []
    for start in range(0, images.shape[0], batch_size):
        preds.append(predict_labels(m, images[start:start + batch_size]))
    return np.concatenate(preds)


def train(cfg: RunConfig, val_fraction: float = VAL_FRACTION,
          momentum: float = MOMENTUM, weight_decay: float = WEIGHT_DECAY,
          poly_power: float = POLY_POWER, max_iters: int | None = None,
          stop_check=None) -> TrainResult:
    """Run the full training contract for one variant.

    max_iters caps the global iteration count below epochs * batches when
    given. stop_check, if provided, is called with the model after each epoch
    and training ends early when it returns True (checkpoints written as
    usual). Both hooks exist for budgeted experiments; the command line uses
    neither.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_resolved(cfg)

    split = load_split(cfg.data_dir)
    pool = load_pool(cfg.data_dir, split.train_ids)
    n = pool.images.shape[0]
    k = cfg.model.num_classes

    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    n_val = round(val_fraction * n)
    order = np.random.default_rng([cfg.seed, 2]).permutation(n)
    val_idx = np.sort(order[:n_val])
    train_idx = np.sort(order[n_val:])
    if train_idx.size == 0:
        raise ConfigError(f"validation holdout consumed all {n} slices")

    aug = cfg.effective_aug()
    if aug.cutmix_fraction > 0 and min(cfg.batch_size, train_idx.size) < 2:
        raise ConfigError("CutMix needs batches of at least 2 slices")

    model = build_model(cfg.model, seed=cfg.seed)
    velocities = {name: np.zeros_like(t.data) for name, t in model.params.items()}
    order_rng = np.random.default_rng([cfg.seed, 0])
    aug_rng = np.random.default_rng([cfg.seed, 1, cfg.aug.rng_seed])

    spans = _batch_plan(train_idx.size, cfg.batch_size)
    if not spans:
        raise ConfigError(
            f"batch plan is empty for {train_idx.size} slices at batch size "
            f"{cfg.batch_size}")
    max_iter = cfg.epochs * len(spans)
    if max_iters is not None:
        max_iter = min(max_iter, max_iters)

    result = TrainResult(model=model, log_path=out_dir / "train_log.csv",
                         best_path=out_dir / "best.jckp", best_epoch=0,
                         best_val_dice=-1.0)
    rows = []
    it = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = train_idx[order_rng.permutation(train_idx.size)]
        for start, stop in spans:
            if it >= max_iter:
                break
            batch = perm[start:stop]
            images, labels, records = augment_batch(
                pool.images[batch].copy(), pool.labels[batch].copy(),
                aug, aug_rng)
            result.records.extend(records)

            model.zero_grad()
            with Tape() as tape:
                value = loss_fn(forward(Tensor(images), model), labels, k)
            loss_val = float(value.data[0])
            if not np.isfinite(loss_val):
                offenders = [(int(i),) + pool.source[int(i)] for i in batch]
                raise NumericError(
                    f"non-finite loss {loss_val} at epoch {epoch} iter "
                    f"{it + 1}; batch rows (pool index, scan, slice): "
                    f"{offenders}")
            backward(tape, value)

            lr = poly_lr(cfg.base_lr, it, max_iter, poly_power)
            sgd_step(model, velocities, lr, momentum, weight_decay)
            it += 1
            result.losses.append(loss_val)
            rows.append((epoch, it, loss_val, lr))

        arrays = {name: t.data for name, t in model.params.items()}
        save_checkpoint(out_dir / f"epoch_{epoch:03d}.jckp", arrays)

        if val_idx.size:
            preds = _predict_pool(model, pool.images[val_idx], cfg.batch_size)
            report = evaluate_volume(list(preds), list(pool.labels[val_idx]), k)
            score = report.mean_dice
            result.val_dice.append(score)
            if score > result.best_val_dice:
                result.best_val_dice = score
                result.best_epoch = epoch
                save_checkpoint(result.best_path, arrays)
        else:
            result.best_epoch = epoch
            save_checkpoint(result.best_path, arrays)

        if it >= max_iter or (stop_check is not None and stop_check(model)):
            break

    with open(result.log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for epoch, iteration, loss_val, lr in rows:
            writer.writerow([epoch, iteration, f"{loss_val:.6f}", f"{lr:.6f}"])
    return result


def evaluate_scans(m: ModelState, data_dir, scan_ids, num_classes: int,
                   batch_size: int = 8):
    """Score each scan as a stacked volume; returns (combined, per-scan)."""
    reports: list[tuple[int, MetricReport]] = []
    for sid in scan_ids:
        scan = load_scan(data_dir, sid)
        images = np.stack([sl.image for sl in scan.slices]).astype(np.float32)
        gts = [sl.label for sl in scan.slices]
        preds = _predict_pool(m, images, batch_size)
        reports.append((sid, evaluate_volume(list(preds), gts, num_classes)))
    combined = aggregate_reports([r for _, r in reports])
    return combined, reports
