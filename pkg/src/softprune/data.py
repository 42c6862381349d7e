"""Dataset container plus MNIST IDX and CIFAR-10 binary readers."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


@dataclass
class Dataset:
    """Images (N, C, H, W) normalized per channel, with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    augment: bool = field(default=False, repr=False)
    seed: int = field(default=0, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise InputError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels outside [0, {self.num_classes})")
        self._aug_rng = np.random.default_rng(self.seed)

    def __len__(self):
        return self.labels.shape[0]

    def batch(self, idx):
        x = self.images[idx]
        if self.augment:
            x = random_crop_flip(x, self._aug_rng)
        return x, self.labels[idx]

    def subset(self, n, seed=None):
        """First ``n`` samples, or a seeded random ``n`` when ``seed`` is given."""
        if n is None or n >= len(self):
            return self
        idx = np.arange(n) if seed is None else np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return Dataset(self.images[idx], self.labels[idx], self.split, self.num_classes,
                       self.mean, self.std, self.augment, self.seed)

    def astype(self, dtype):
        self.images = self.images.astype(dtype, copy=False)
        return self


def normalize(images, mean=None, std=None):
    """Per-channel standardization; statistics come from ``images`` unless given."""
    if mean is None:
        mean = images.mean(axis=(0, 2, 3))
        std = images.std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)
    out = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return out.astype(np.float32), mean, std


def pad_to(images, size):
    """Zero-pad (raw pixel value 0) at the bottom/right up to ``size`` x ``size``."""
    h, w = images.shape[2:]
    if h > size or w > size:
        raise InputError(f"cannot pad {h}x{w} images to {size}x{size}")
    return np.pad(images, ((0, 0), (0, 0), (0, size - h), (0, size - w)))


def random_crop_flip(x, rng, pad=4):
    """Pad-by-``pad`` random crop plus random horizontal flip."""
    b, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    dy = rng.integers(0, 2 * pad + 1, b)
    dx = rng.integers(0, 2 * pad + 1, b)
    flip = rng.random(b) < 0.5
    for i in range(b):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def _open(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with (gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")) as fh:
        return fh.read()


def read_idx(path, expected_magic):
    """Raw uint8 array from an IDX file (optionally gzipped)."""
    raw = _open(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise FormatError(f"{path}: truncated IDX payload, need {need} bytes after header", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as an IDX file (images 3-d or labels 1-d)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path=None, split="train", stats=None, pad=None, num_classes=10):
    """Load an MNIST-style IDX image file (and labels) as a normalized Dataset.

    Args:
        images_path: IDX file with magic 0x00000803 (N x H x W uint8).
        labels_path: IDX file with magic 0x00000801; labels default to 0.
        stats: ``(mean, std)`` from the training split; computed here if None.
        pad: optional odd target size for zero padding (see :func:`pad_to`).
    """
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = (read_idx(labels_path, IDX_LABELS_MAGIC) if labels_path is not None
              else np.zeros(images.shape[0], dtype=np.uint8))
    if labels.shape[0] != images.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images[:, None].astype(np.float64) / 255.0
    if pad:
        x = pad_to(x, pad)
    mean, std = stats if stats is not None else (None, None)
    x, mean, std = normalize(x, mean, std)
    return Dataset(x, labels, split, num_classes, mean, std)


def load_cifar_bin(paths, split="train", stats=None):
    """Load CIFAR-10 binary batches (3073-byte records: label + 3x32x32 pixels)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    for path in paths:
        raw = _open(path)
        if len(raw) % CIFAR_RECORD:
            whole = len(raw) // CIFAR_RECORD * CIFAR_RECORD
            raise FormatError(f"{path}: truncated CIFAR record", offset=whole)
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = records[:, 0]
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"label {labels[bad]} out of range", offset=bad * CIFAR_RECORD)
    x = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    mean, std = stats if stats is not None else (None, None)
    x, mean, std = normalize(x, mean, std)
    return Dataset(x, labels, split, 10, mean, std)


def synthetic_pair(n_train, n_test, shape=(1, 12, 12), num_classes=10, seed=0, noise=0.5):
    """Seeded class-template images plus Gaussian noise, as ``(train, test)``.

    Both splits share the templates; the test split is normalized with the
    training statistics.
    """
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((num_classes, *shape))

    def make(n, sub_seed):
        r = np.random.default_rng([seed, sub_seed])
        labels = np.arange(n) % num_classes
        r.shuffle(labels)
        return templates[labels] + noise * r.standard_normal((n, *shape)), labels

    xtr, ytr = make(n_train, 1)
    xte, yte = make(n_test, 2)
    xtr, mean, std = normalize(xtr)
    xte, _, _ = normalize(xte, mean, std)
    return (Dataset(xtr, ytr, "train", num_classes, mean, std),
            Dataset(xte, yte, "test", num_classes, mean, std))
