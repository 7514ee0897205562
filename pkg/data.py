import os
import glob
import struct
import logging
from dataclasses import dataclass, replace
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core import DATASET_DEFAULTS, DataError, DatasetSettings

logger = logging.getLogger("lsskd.data")

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_RECORD = {"cifar10": 1 + CIFAR_PIXELS, "cifar100": 2 + CIFAR_PIXELS}
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
PAD = 4


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # C x H x W, normalized
    label: int
    sample_id: int
    coarse_label: Optional[int] = None


class DatasetMeta(BaseModel):
    model_config = ConfigDict(frozen=True)
    name: str
    num_classes: int = Field(ge=2)
    image_shape: Tuple[int, int, int]
    channel_means: Tuple[float, ...]
    channel_stds: Tuple[float, ...]
    train_count: int = 0
    test_count: int = 0


def _normalize(raw: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """raw: N x C x H x W bytes -> float32 in [0,1] then per-channel (x - mean) / std."""
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (raw.astype(np.float32) / 255.0 - m) / s


def _denormalize(pixels: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    return np.clip(np.rint((pixels.astype(np.float64) * s + m) * 255.0), 0, 255).astype(np.uint8)


def _meta_for(name: str, mean, std, train_count=0, test_count=0) -> DatasetMeta:
    n, shape, _, _ = DATASET_DEFAULTS[name]
    return DatasetMeta(name=name, num_classes=n, image_shape=shape, channel_means=tuple(mean), channel_stds=tuple(std),
                       train_count=train_count, test_count=test_count)


# --- CIFAR BINARY ---
def load_cifar_binary(path: str, variant: str, mean=None, std=None, first_id: int = 0) -> Tuple[List[ImageSample], DatasetMeta]:
    if variant not in CIFAR_RECORD: raise DataError(f"unknown CIFAR variant {variant!r}")
    _, _, dmean, dstd = DATASET_DEFAULTS[variant]
    mean, std = mean or dmean, std or dstd
    if not os.path.isfile(path): raise DataError(f"dataset file not found: {path}")
    with open(path, "rb") as f: buf = f.read()
    rec = CIFAR_RECORD[variant]
    if len(buf) % rec: raise DataError(f"{path}: {len(buf)} bytes is not a multiple of the {rec}-byte {variant} record (truncated file?)")
    records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    labels = records[:, rec - CIFAR_PIXELS - 1].astype(np.int64)
    n_classes = DATASET_DEFAULTS[variant][0]
    bad = np.nonzero(labels >= n_classes)[0]
    if bad.size: raise DataError(f"{path}: record {int(bad[0])} has label {int(labels[bad[0]])} >= {n_classes}")
    coarse = records[:, 0].astype(np.int64) if variant == "cifar100" else None
    pixels = _normalize(records[:, rec - CIFAR_PIXELS:].reshape(-1, 3, 32, 32), mean, std)
    samples = [ImageSample(pixels[i], int(labels[i]), first_id + i, None if coarse is None else int(coarse[i])) for i in range(len(records))]
    return samples, _meta_for(variant, mean, std, train_count=len(samples))


def to_cifar_bytes(samples: Sequence[ImageSample], variant: str, mean=None, std=None) -> bytes:
    _, _, dmean, dstd = DATASET_DEFAULTS[variant]
    mean, std = mean or dmean, std or dstd
    out = bytearray()
    for s in samples:
        if variant == "cifar100": out.append(s.coarse_label or 0)
        out.append(s.label)
        out += _denormalize(s.pixels, mean, std).tobytes()
    return bytes(out)


# --- IDX ---
def _read(path: str) -> bytes:
    if not os.path.isfile(path): raise DataError(f"dataset file not found: {path}")
    with open(path, "rb") as f: return f.read()


def load_idx(images_path: str, labels_path: str, mean=None, std=None, num_classes: int = 10) -> Tuple[List[ImageSample], DatasetMeta]:
    _, _, dmean, dstd = DATASET_DEFAULTS["mnist"]
    mean, std = mean or dmean, std or dstd
    ibuf, lbuf = _read(images_path), _read(labels_path)
    if len(ibuf) < 16 or len(lbuf) < 8: raise DataError("IDX header truncated")
    magic, count, rows, cols = struct.unpack(">IIII", ibuf[:16])
    if magic != IDX_IMAGES_MAGIC: raise DataError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    lmagic, lcount = struct.unpack(">II", lbuf[:8])
    if lmagic != IDX_LABELS_MAGIC: raise DataError(f"{labels_path}: bad magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if count != lcount: raise DataError(f"IDX count mismatch: {count} images vs {lcount} labels")
    if len(ibuf) != 16 + count * rows * cols or len(lbuf) != 8 + count: raise DataError("IDX payload length does not match its header")
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8).astype(np.int64)
    if count and labels.max() >= num_classes: raise DataError(f"{labels_path}: label {int(labels.max())} >= {num_classes}")
    pixels = _normalize(np.frombuffer(ibuf, dtype=np.uint8, offset=16).reshape(count, 1, rows, cols), mean, std)
    samples = [ImageSample(pixels[i], int(labels[i]), i) for i in range(count)]
    meta = DatasetMeta(name="mnist", num_classes=num_classes, image_shape=(1, rows, cols), channel_means=tuple(mean),
                       channel_stds=tuple(std), train_count=count)
    return samples, meta


def to_idx_bytes(samples: Sequence[ImageSample], mean=None, std=None) -> Tuple[bytes, bytes]:
    _, _, dmean, dstd = DATASET_DEFAULTS["mnist"]
    mean, std = mean or dmean, std or dstd
    rows, cols = samples[0].pixels.shape[1:] if samples else (28, 28)
    images = struct.pack(">IIII", IDX_IMAGES_MAGIC, len(samples), rows, cols) + b"".join(_denormalize(s.pixels, mean, std).tobytes() for s in samples)
    labels = struct.pack(">II", IDX_LABELS_MAGIC, len(samples)) + bytes(s.label for s in samples)
    return images, labels


# --- DATASET ROOT ---
def per_class_limit(samples: Sequence[ImageSample], limit: int, num_classes: int) -> List[ImageSample]:
    if not limit: return list(samples)
    cap = max(1, limit // num_classes); taken = {}
    kept = []
    for s in sorted(samples, key=lambda s: s.sample_id):
        if taken.get(s.label, 0) < cap: kept.append(s); taken[s.label] = taken.get(s.label, 0) + 1
    return kept


def load_dataset(settings: DatasetSettings, include_train: bool = True) -> Tuple[List[ImageSample], List[ImageSample], DatasetMeta]:
    root = os.path.join(settings.dir, settings.name)
    if not os.path.isdir(root): raise DataError(f"dataset directory not found: {root}")
    mean, std = settings.mean, settings.std
    if settings.name == "cifar10":
        files = sorted(glob.glob(os.path.join(root, "data_batch_*.bin"))) if include_train else []
        if include_train and not files: raise DataError(f"no data_batch_*.bin files under {root}")
        train = []
        for path in files: train += load_cifar_binary(path, "cifar10", mean, std, first_id=len(train))[0]
        test, _ = load_cifar_binary(os.path.join(root, "test_batch.bin"), "cifar10", mean, std)
    elif settings.name == "cifar100":
        train = load_cifar_binary(os.path.join(root, "train.bin"), "cifar100", mean, std)[0] if include_train else []
        test, _ = load_cifar_binary(os.path.join(root, "test.bin"), "cifar100", mean, std)
    else:
        train = load_idx(os.path.join(root, "train-images-idx3-ubyte"), os.path.join(root, "train-labels-idx1-ubyte"), mean, std)[0] if include_train else []
        test, _ = load_idx(os.path.join(root, "t10k-images-idx3-ubyte"), os.path.join(root, "t10k-labels-idx1-ubyte"), mean, std)
    n = settings.num_classes
    train, test = per_class_limit(train, settings.train_limit, n), per_class_limit(test, settings.test_limit, n)
    logger.info("loaded %s: %d train / %d test samples from %s", settings.name, len(train), len(test), root)
    return train, test, _meta_for(settings.name, mean, std, len(train), len(test))


# --- AUGMENTATION ---
def sample_rng(seed: int, epoch: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, sample_id])


def crop_flip(sample: ImageSample, top: int, left: int, flip: bool) -> ImageSample:
    _, H, W = sample.pixels.shape
    padded = np.pad(sample.pixels, ((0, 0), (PAD, PAD), (PAD, PAD)))
    out = padded[:, top:top + H, left:left + W]
    if flip: out = out[:, :, ::-1]
    return replace(sample, pixels=np.ascontiguousarray(out))


def augment(sample: ImageSample, rng: np.random.Generator) -> ImageSample:
    """Zero-pad 4, random crop back to H x W, horizontal flip with probability 0.5."""
    top, left = (int(v) for v in rng.integers(0, 2 * PAD + 1, size=2))
    return crop_flip(sample, top, left, bool(rng.random() < 0.5))


# --- SUBSETS / BATCHES ---
def stratified_subset(samples: Sequence[ImageSample], fraction: float, seed: int, num_classes: Optional[int] = None) -> List[ImageSample]:
    if not 0 < fraction <= 1: raise DataError(f"subset fraction must be in (0, 1], got {fraction}")
    by_class = {}
    for s in samples: by_class.setdefault(s.label, []).append(s)
    for c in range(num_classes or 0):
        if c not in by_class: raise DataError(f"class {c} has no samples to subset")
    if fraction == 1.0: return list(samples)
    rng = np.random.default_rng(seed); kept = []
    for c in sorted(by_class):
        members = by_class[c]
        k = int(np.floor(fraction * len(members) + 0.5))
        kept += [members[i] for i in rng.permutation(len(members))[:k]]
    return sorted(kept, key=lambda s: s.sample_id)


def class_counts(samples: Sequence[ImageSample]) -> dict:
    counts = {}
    for s in samples: counts[s.label] = counts.get(s.label, 0) + 1
    return dict(sorted(counts.items()))


def batch_iter(samples: Sequence[ImageSample], batch_size: int, seed: int, epoch: int) -> Iterator[List[ImageSample]]:
    if batch_size < 1: raise DataError("batch size must be >= 1")
    order = np.random.default_rng(seed ^ epoch).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield [samples[i] for i in order[start:start + batch_size]]


def collate(batch: Sequence[ImageSample], augmented: bool = False, seed: int = 0, epoch: int = 0):
    if augmented: batch = [augment(s, sample_rng(seed, epoch, s.sample_id)) for s in batch]
    x = np.stack([s.pixels for s in batch])
    labels = np.array([s.label for s in batch], dtype=np.int64)
    ids = np.array([s.sample_id for s in batch], dtype=np.int64)
    return x, labels, ids
