"""Binary tensor/checkpoint formats, phantom generation, dataset layout.

Tensor files (.jcpt): magic "JCPT", version 0x01, dtype byte (0 = float32,
1 = uint8), ndim byte, ndim little-endian u32 dims, then the row-major
little-endian payload. Checkpoints (.jckp): magic "JCKP", version 0x01,
u32 entry count, then per entry a u16 name length, the UTF-8 name, and an
embedded tensor blob. Both round-trip bitwise.

Phantom scans imitate multi-organ anatomy: each foreground class owns a
fixed location prior on a ring around the image center, jittered per scan,
and organs are filled ellipses whose size breathes across slices like an
ellipsoid cut by parallel planes. Intensities follow a fixed per-class table
plus Gaussian noise. Generation is a pure function of (seed, shape config);
scan k uses stream seed ^ k, so scans can be generated independently.

Dataset directory layout:
    data_dir/scans/scan_<id>/slice_<k>.img.jcpt   float32 image, 1 x H x W
    data_dir/scans/scan_<id>/slice_<k>.lbl.jcpt   uint8 labels, H x W
    data_dir/split.json                           {"train": [...], "test": [...]}
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (CompatibilityError, ConfigError, FormatError,
                     ValidationError)
from .tensor import Tensor

MAGIC_TENSOR = b"JCPT"
MAGIC_CHECKPOINT = b"JCKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("uint8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


def _encode_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise ValidationError(f"unsupported dtype {arr.dtype}; use float32 or uint8")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 255:
        raise ValidationError(f"rank {arr.ndim} exceeds format limit")
    head = MAGIC_TENSOR + bytes([VERSION, _DTYPE_CODES[arr.dtype], arr.ndim])
    dims = b"".join(struct.pack("<I", d) for d in arr.shape)
    if arr.dtype == np.dtype("float32"):
        payload = arr.astype("<f4").tobytes()
    else:
        payload = arr.tobytes()
    return head + dims + payload


class _Reader:
    """Tracks the byte offset so format errors can point at the failure."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    @property
    def offset(self) -> int:
        return self.pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"truncated file: reading {what} needs {n} bytes, "
                f"{len(self.blob) - self.pos} left", self.offset)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def _decode_array(r: _Reader) -> np.ndarray:
    start = r.offset
    magic = r.take(4, "magic")
    if magic != MAGIC_TENSOR:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC_TENSOR!r}", start)
    version = r.take(1, "version")[0]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", r.offset - 1)
    code = r.take(1, "dtype")[0]
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", r.offset - 1)
    ndim = r.take(1, "ndim")[0]
    dims = tuple(struct.unpack("<I", r.take(4, f"dim {i}"))[0]
                 for i in range(ndim))
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = r.take(count * dtype.itemsize, "payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def write_array(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(_encode_array(np.asarray(arr)))


def read_array(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    arr = _decode_array(r)
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} trailing bytes", r.offset)
    return arr


def write_tensor(path, t: Tensor) -> None:
    write_array(path, t.data)


def read_tensor(path) -> Tensor:
    arr = read_array(path)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return Tensor(arr)


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    parts = [MAGIC_CHECKPOINT, bytes([VERSION]),
             struct.pack("<I", len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError(f"parameter name too long: {name[:32]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        parts.append(_encode_array(data))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, expected_names=None) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != MAGIC_CHECKPOINT:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC_CHECKPOINT!r}", 0)
    version = r.take(1, "version")[0]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    count = struct.unpack("<I", r.take(4, "entry count"))[0]
    params: dict[str, np.ndarray] = {}
    for i in range(count):
        nlen = struct.unpack("<H", r.take(2, f"name length {i}"))[0]
        name = r.take(nlen, f"name {i}").decode("utf-8")
        if name in params:
            raise FormatError(f"duplicate parameter {name!r}", r.offset)
        params[name] = _decode_array(r)
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} trailing bytes", r.offset)
    if expected_names is not None:
        have = set(params)
        want = set(expected_names)
        if have != want:
            missing = sorted(want - have)
            extra = sorted(have - want)
            raise CompatibilityError(
                f"checkpoint does not match model: missing {missing}, "
                f"extra {extra}")
    return params


@dataclass
class LabeledSlice:
    image: np.ndarray  # 1 x H x W float32 in [0, 1]
    label: np.ndarray  # H x W uint8 in [0, K)


@dataclass
class PhantomScan:
    scan_id: int
    slices: list[LabeledSlice]


@dataclass
class DatasetSplit:
    train_ids: list[int]
    test_ids: list[int]


def class_intensity(c: int) -> float:
    return 0.1 + 0.08 * c


RING_RADIUS = 0.28
ORGAN_RADII = (0.07, 0.13)
_MIN_SIDE = 16
_MAX_ATTEMPTS = 64


def _rasterize_scan(rng: np.random.Generator, slices: int, h: int, w: int,
                    k: int) -> np.ndarray:
    """One geometry draw: labels (slices, h, w); higher class wins overlaps."""
    side = min(h, w)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.zeros((slices, h, w), dtype=np.uint8)
    for c in range(1, k):
        angle = 2.0 * np.pi * (c - 1) / (k - 1)
        oy = cy + RING_RADIUS * side * np.sin(angle) + rng.uniform(-0.03, 0.03) * side
        ox = cx + RING_RADIUS * side * np.cos(angle) + rng.uniform(-0.03, 0.03) * side
        a = rng.uniform(*ORGAN_RADII) * side
        b = rng.uniform(*ORGAN_RADII) * side
        phi = rng.uniform(0.0, np.pi)
        zc = rng.uniform(0.3, 0.7) * slices
        zr = rng.uniform(0.6, 0.9) * slices
        dy = ys - oy
        dx = xs - ox
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        for z in range(slices):
            m2 = 1.0 - (((z + 0.5) - zc) / zr) ** 2
            if m2 <= 0:
                continue
            m = np.sqrt(m2)
            inside = (u / (a * m)) ** 2 + (v / (b * m)) ** 2 <= 1.0
            labels[z][inside] = c
    return labels


def generate_phantoms(seed: int, n_scans: int = 30, slices_per_scan: int = 8,
                      h: int = 64, w: int = 64, k: int = 9) -> list[PhantomScan]:
    if k < 2:
        raise ConfigError(f"need at least 2 classes, got {k}")
    if n_scans < 1 or slices_per_scan < 1:
        raise ConfigError("need at least one scan and one slice per scan")
    if min(h, w) < _MIN_SIDE:
        raise ConfigError(
            f"organ priors need at least {_MIN_SIDE}x{_MIN_SIDE}, got {h}x{w}")
    scans = []
    for scan_id in range(n_scans):
        rng = np.random.default_rng(seed ^ scan_id)
        for attempt in range(_MAX_ATTEMPTS):
            labels = _rasterize_scan(rng, slices_per_scan, h, w, k)
            present = np.unique(labels)
            if all(c in present for c in range(1, k)):
                break
        else:
            raise ConfigError(
                f"could not place all {k - 1} organs on {h}x{w} after "
                f"{_MAX_ATTEMPTS} draws; enlarge the image or reduce classes")
        base = class_intensity(np.arange(k, dtype=np.float64))
        slices = []
        for z in range(slices_per_scan):
            img = base[labels[z]] + rng.normal(0.0, 0.05, size=(h, w))
            img = np.clip(img, 0.0, 1.0).astype(np.float32)[None]
            slices.append(LabeledSlice(image=img, label=labels[z].copy()))
        scans.append(PhantomScan(scan_id=scan_id, slices=slices))
    return scans


def split_dataset(scans, seed: int) -> DatasetSplit:
    """Shuffle scan ids by seed and cut at round(n * 18/30)."""
    ids = [s.scan_id if isinstance(s, PhantomScan) else int(s) for s in scans]
    if len(ids) < 2:
        raise ConfigError(f"need at least 2 scans to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate scan ids")
    order = np.array(sorted(ids))
    np.random.default_rng(seed).shuffle(order)
    cut = round(len(order) * 18 / 30)
    return DatasetSplit(train_ids=[int(i) for i in order[:cut]],
                        test_ids=[int(i) for i in order[cut:]])


def _scan_dir(data_dir, scan_id: int) -> Path:
    return Path(data_dir) / "scans" / f"scan_{scan_id}"


def save_dataset(data_dir, scans: list[PhantomScan], split: DatasetSplit) -> None:
    root = Path(data_dir)
    root.mkdir(parents=True, exist_ok=True)
    for scan in scans:
        d = _scan_dir(root, scan.scan_id)
        d.mkdir(parents=True, exist_ok=True)
        for idx, sl in enumerate(scan.slices):
            write_array(d / f"slice_{idx}.img.jcpt", sl.image)
            write_array(d / f"slice_{idx}.lbl.jcpt", sl.label.astype(np.uint8))
    with open(root / "split.json", "w") as fh:
        json.dump({"train": split.train_ids, "test": split.test_ids}, fh)
        fh.write("\n")


def load_split(data_dir) -> DatasetSplit:
    path = Path(data_dir) / "split.json"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed split file {path}: {exc}") from exc
    if not isinstance(doc, dict) or set(doc) != {"train", "test"}:
        raise ValidationError(
            f"split file must hold exactly 'train' and 'test', got {sorted(doc)}")
    train = [int(i) for i in doc["train"]]
    test = [int(i) for i in doc["test"]]
    if set(train) & set(test):
        raise ValidationError("train and test scan ids overlap")
    return DatasetSplit(train_ids=train, test_ids=test)


def load_scan(data_dir, scan_id: int) -> PhantomScan:
    d = _scan_dir(data_dir, scan_id)
    if not d.is_dir():
        raise FileNotFoundError(f"no scan directory {d}")
    slices = []
    idx = 0
    while (d / f"slice_{idx}.img.jcpt").exists():
        img = read_array(d / f"slice_{idx}.img.jcpt")
        lbl = read_array(d / f"slice_{idx}.lbl.jcpt")
        slices.append(LabeledSlice(image=img, label=lbl))
        idx += 1
    if not slices:
        raise FileNotFoundError(f"scan directory {d} holds no slices")
    return PhantomScan(scan_id=scan_id, slices=slices)
