"""Batch augmentation: CutMix plus flip/rotate.

CutMix picks exactly floor(fraction * B) target images, pastes a rectangle
(pixels and labels together) from a donor's pre-augmentation copy, and logs
one record per paste. Flip/rotate draws one orientation per image. During
training the CutMix targets receive only the paste; every other image gets
an orientation draw.

All randomness comes from the caller's Generator. Draw order is part of the
contract (targets, then per target donor / area / aspect / position, then
per-image orientation) so equal seeds reproduce byte-identical batches.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class AugConfig:
    cutmix_fraction: float = 0.33
    area_min: float = 0.20
    area_max: float = 0.60
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.cutmix_fraction <= 1.0:
            raise ConfigError(
                f"cutmix_fraction must be in [0, 1], got {self.cutmix_fraction}")
        if not 0.0 < self.area_min <= self.area_max < 1.0:
            raise ConfigError(
                f"need 0 < area_min <= area_max < 1, got "
                f"[{self.area_min}, {self.area_max}]")


@dataclass
class CutMixRecord:
    target_index: int
    donor_index: int
    rect: tuple[int, int, int, int]  # x0, y0, w, h
    area_fraction: float


def cutmix_batch(images: np.ndarray, labels: np.ndarray, cfg: AugConfig,
                 rng: np.random.Generator):
    """Paste donor rectangles into floor(fraction * B) target images.

    Pastes read from the original batch, so a chained donor never leaks
    already-mixed pixels. Non-target images pass through bitwise.
    """
    if images.ndim != 4 or labels.ndim != 3 or images.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"expected images (B,C,H,W) and labels (B,H,W), got "
            f"{images.shape} and {labels.shape}")
    if images.shape[2:] != labels.shape[1:]:
        raise ShapeError(
            f"image grid {images.shape[2:]} differs from label grid {labels.shape[1:]}")
    b, _, h, w = images.shape
    count = int(np.floor(cfg.cutmix_fraction * b))
    if count == 0:
        return images.copy(), labels.copy(), []
    if b < 2:
        raise ConfigError(f"CutMix needs a batch of at least 2, got {b}")

    out_images = images.copy()
    out_labels = labels.copy()
    records = []
    targets = sorted(int(t) for t in rng.choice(b, size=count, replace=False))
    for i in targets:
        donor = int(rng.integers(0, b - 1))
        if donor >= i:
            donor += 1
        lam = float(rng.uniform(cfg.area_min, cfg.area_max))
        aspect = float(rng.uniform(0.5, 2.0))
        rw = int(np.clip(np.rint(w * np.sqrt(lam * aspect)), 1, w))
        rh = int(np.clip(np.rint(h * np.sqrt(lam / aspect)), 1, h))
        x0 = int(rng.integers(0, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        out_images[i, :, y0:y0 + rh, x0:x0 + rw] = \
            images[donor, :, y0:y0 + rh, x0:x0 + rw]
        out_labels[i, y0:y0 + rh, x0:x0 + rw] = \
            labels[donor, y0:y0 + rh, x0:x0 + rw]
        records.append(CutMixRecord(
            target_index=i, donor_index=donor, rect=(x0, y0, rw, rh),
            area_fraction=rw * rh / (h * w)))
    return out_images, out_labels, records


ORIENTATIONS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


def orientation_ops(square: bool) -> tuple[str, ...]:
    if square:
        return ORIENTATIONS
    return ("identity", "hflip", "vflip", "rot180")


def apply_orientation(name: str, arr: np.ndarray) -> np.ndarray:
    """Apply a named orientation over the trailing two axes."""
    if name == "identity":
        return arr.copy()
    if name == "hflip":
        return np.ascontiguousarray(arr[..., ::-1])
    if name == "vflip":
        return np.ascontiguousarray(arr[..., ::-1, :])
    if name in ("rot90", "rot180", "rot270"):
        k = {"rot90": 1, "rot180": 2, "rot270": 3}[name]
        return np.ascontiguousarray(np.rot90(arr, k, axes=(-2, -1)))
    raise ConfigError(f"unknown orientation {name!r}")


def flip_rotate(image: np.ndarray, label: np.ndarray,
                rng: np.random.Generator):
    """Draw one orientation uniformly and apply it to image and label.

    Quarter-turns are only offered on square grids; rectangular inputs fall
    back to the shape-preserving subset.
    """
    if image.shape[-2:] != label.shape[-2:]:
        raise ShapeError(
            f"image grid {image.shape[-2:]} differs from label grid {label.shape[-2:]}")
    ops = orientation_ops(image.shape[-2] == image.shape[-1])
    name = ops[int(rng.integers(0, len(ops)))]
    return apply_orientation(name, image), apply_orientation(name, label)


def augment_batch(images: np.ndarray, labels: np.ndarray, cfg: AugConfig,
                  rng: np.random.Generator, flip: bool = True):
    """Full training policy: CutMix first, orientations for everyone else."""
    out_images, out_labels, records = cutmix_batch(images, labels, cfg, rng)
    if flip:
        skip = {r.target_index for r in records}
        for i in range(images.shape[0]):
            if i in skip:
                continue
            out_images[i], out_labels[i] = flip_rotate(
                out_images[i], out_labels[i], rng)
    return out_images, out_labels, records


def write_records_csv(records: list[CutMixRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["target_index", "donor_index", "x0", "y0", "w", "h",
                         "area_fraction"])
        for r in records:
            x0, y0, rw, rh = r.rect
            writer.writerow([r.target_index, r.donor_index, x0, y0, rw, rh,
                             f"{r.area_fraction:.6f}"])
