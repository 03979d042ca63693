"""Dataset ingestion, augmentation and batching.

All loaders return images as float32 arrays of shape (N, C, H, W) with pixel
values in [0, 1] and integer labels in [0, K). Attack budgets everywhere else
in the package are expressed on that same [0, 1] scale.
"""

from __future__ import annotations

import gzip
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD_BYTES = 3073
CIFAR_PIXELS = 3072
CIFAR10C_ROWS_PER_SEVERITY = 10000
CORRUPTIONS = (
    "snow",
    "frost",
    "zoom_blur",
    "motion_blur",
    "jpeg_compression",
    "gaussian_noise",
)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR10_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


class DataFormatError(ValueError):
    """Raised when a dataset file does not match its binary layout."""


@dataclass
class LabeledDataset:
    """Images in [0, 1] with shape (N, C, H, W) and integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    class_count: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be 4-d (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"image/label count mismatch: {len(self.images)} images, {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index, name: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            self.images[index], self.labels[index], name or self.name, self.class_count
        )

    def split(self, first: int) -> tuple["LabeledDataset", "LabeledDataset"]:
        """Split into the first ``first`` samples and the rest."""
        return (
            self.subset(slice(0, first), f"{self.name}[:{first}]"),
            self.subset(slice(first, None), f"{self.name}[{first}:]"),
        )


# A batch is just a small dataset; the alias keeps call sites readable.
LabeledBatch = LabeledDataset


@dataclass(frozen=True)
class AugmentPolicy:
    enabled: bool = True
    random_crop: bool = True
    pad: int = 4
    random_flip: bool = True
    flip_prob: float = 0.5

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(enabled=False)


@dataclass
class CorruptionSet:
    corruption_name: str
    severity: int
    dataset: LabeledDataset

    def __post_init__(self):
        if self.corruption_name not in CORRUPTIONS:
            raise ValueError(f"unsupported corruption {self.corruption_name!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must lie in [1, 5], got {self.severity}")


# --------------------------------------------------------------------------- MNIST


def _open_maybe_gz(path: Path) -> bytes:
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        path = path.with_name(path.name + ".gz")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def parse_idx_images(raw: bytes) -> np.ndarray:
    if len(raw) < 16:
        raise DataFormatError("truncated payload: IDX image header is incomplete")
    magic, count, rows, cols = np.frombuffer(raw, dtype=">u4", count=4)
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(f"malformed magic number {magic} in IDX image file (expected 2051)")
    expected = int(count) * int(rows) * int(cols)
    payload = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if payload.size < expected:
        raise DataFormatError(
            f"truncated payload: expected {expected} pixel bytes, found {payload.size}"
        )
    return payload[:expected].reshape(int(count), int(rows), int(cols))


def parse_idx_labels(raw: bytes) -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError("truncated payload: IDX label header is incomplete")
    magic, count = np.frombuffer(raw, dtype=">u4", count=2)
    if magic != IDX_LABEL_MAGIC:
        raise DataFormatError(f"malformed magic number {magic} in IDX label file (expected 2049)")
    payload = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if payload.size < count:
        raise DataFormatError(f"truncated payload: expected {count} labels, found {payload.size}")
    return payload[: int(count)]


def load_mnist(path, split: str = "train") -> LabeledDataset:
    """Load one MNIST split from a directory holding the IDX files.

    ``path`` may also be a pair ``(images_file, labels_file)``. Files may be
    gzip-compressed with a ``.gz`` suffix.
    """
    if isinstance(path, (tuple, list)):
        image_file, label_file = (Path(p) for p in path)
    else:
        root = Path(path)
        image_file, label_file = (root / name for name in MNIST_FILES[split])
    images = parse_idx_images(_open_maybe_gz(image_file))
    labels = parse_idx_labels(_open_maybe_gz(label_file))
    if len(images) != len(labels):
        raise DataFormatError(
            f"image/label count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    if labels.size and labels.max() >= 10:
        raise DataFormatError(f"label out of range: found label {int(labels.max())} (K=10)")
    pixels = images[:, None, :, :].astype(np.float32) / 255.0
    return LabeledDataset(pixels, labels.astype(np.int64), f"mnist-{split}", 10)


def write_idx(images: np.ndarray, labels: np.ndarray, image_file, label_file) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as uncompressed IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    header = np.array([IDX_IMAGE_MAGIC, n, rows, cols], dtype=">u4").tobytes()
    Path(image_file).write_bytes(header + images.tobytes())
    header = np.array([IDX_LABEL_MAGIC, len(labels)], dtype=">u4").tobytes()
    Path(label_file).write_bytes(header + labels.tobytes())


# --------------------------------------------------------------------------- CIFAR-10


def parse_cifar10_records(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) == 0:
        raise DataFormatError("no records in CIFAR-10 batch file")
    if len(raw) % CIFAR_RECORD_BYTES:
        raise DataFormatError(
            f"record size mismatch: {len(raw)} bytes is not a multiple of {CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    if labels.max() >= 10:
        raise DataFormatError(f"label out of range: found label {int(labels.max())} (K=10)")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(path, split: str = "train") -> LabeledDataset:
    """Load CIFAR-10 from the binary distribution.

    ``path`` is either a single batch file, a list of batch files, or the
    directory containing ``data_batch_{1..5}.bin`` and ``test_batch.bin``.
    """
    if isinstance(path, (list, tuple)):
        files = [Path(p) for p in path]
    elif Path(path).is_dir():
        files = [Path(path) / name for name in CIFAR10_FILES[split]]
    else:
        files = [Path(path)]
    parts = [parse_cifar10_records(f.read_bytes()) for f in files]
    images = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
    labels = np.concatenate([p[1] for p in parts]).astype(np.int64)
    return LabeledDataset(images, labels, f"cifar10-{split}", 10)


def write_cifar10_batch(images: np.ndarray, labels: np.ndarray, path) -> None:
    """Write uint8 images (N, 3, 32, 32) and labels as one binary batch file."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), CIFAR_PIXELS)
    records = np.concatenate([np.asarray(labels, np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(records.tobytes())


def load_cifar10c(path, corruption_name: str, severity: int) -> CorruptionSet:
    """Load one (corruption, severity) slice of CIFAR-10-C.

    ``path`` holds ``<corruption>.npy`` arrays of shape (50000, 32, 32, 3) and
    a shared ``labels.npy``; severity s occupies rows [(s-1)*10000, s*10000).
    """
    if corruption_name not in CORRUPTIONS:
        raise ValueError(f"unsupported corruption {corruption_name!r}; choose from {CORRUPTIONS}")
    if not isinstance(severity, (int, np.integer)) or not 1 <= severity <= 5:
        raise ValueError(f"severity must be an integer in [1, 5], got {severity!r}")
    root = Path(path)
    images = np.load(root / f"{corruption_name}.npy", mmap_mode="r")
    labels = np.load(root / "labels.npy", mmap_mode="r")
    rows = 5 * CIFAR10C_ROWS_PER_SEVERITY
    if images.shape != (rows, 32, 32, 3):
        raise DataFormatError(f"array shape mismatch: {images.shape} != ({rows}, 32, 32, 3)")
    if labels.shape[0] != rows:
        raise DataFormatError(f"label array shape mismatch: {labels.shape} vs {rows} images")
    lo, hi = (severity - 1) * CIFAR10C_ROWS_PER_SEVERITY, severity * CIFAR10C_ROWS_PER_SEVERITY
    chunk = np.ascontiguousarray(images[lo:hi].transpose(0, 3, 1, 2)).astype(np.float32) / 255.0
    ds = LabeledDataset(
        chunk, np.asarray(labels[lo:hi], dtype=np.int64), f"cifar10c-{corruption_name}-{severity}"
    )
    return CorruptionSet(corruption_name, int(severity), ds)


# --------------------------------------------------------------------------- synthetic


def make_toy_blobs(
    means: Sequence[Sequence[float]],
    spread: float,
    count: int,
    seed: int = 0,
) -> LabeledDataset:
    """Gaussian blobs around ``means`` (one row per class), ``count`` samples per class.

    Samples are shaped (N, 1, 1, D) so they flow through the image pipeline,
    and clipped to [0, 1].
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    k, d = means.shape
    if k < 2:
        raise ValueError("need at least two class means")
    gaps = np.abs(means[:, None, :] - means[None, :, :]).max(axis=-1)
    if np.any(gaps[~np.eye(k, dtype=bool)] == 0):
        raise ValueError("degenerate blob spec: class means must be pairwise distinct")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), count)
    points = means[labels] + spread * rng.standard_normal((k * count, d))
    perm = rng.permutation(k * count)
    points = np.clip(points[perm], 0.0, 1.0).astype(np.float32)
    return LabeledDataset(points.reshape(-1, 1, 1, d), labels[perm], "toy-blobs", k)


# --------------------------------------------------------------------------- augmentation


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def augment(batch: LabeledBatch, policy: AugmentPolicy, rng: np.random.Generator) -> LabeledBatch:
    """Random zero-padded crop followed by random horizontal flip."""
    if not policy.enabled or len(batch) == 0:
        return batch
    x = batch.images
    n, _, h, w = x.shape
    if policy.random_crop and policy.pad > 0:
        p = policy.pad
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        dy = rng.integers(0, 2 * p + 1, size=n)
        dx = rng.integers(0, 2 * p + 1, size=n)
        x = np.stack([padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w] for i in range(n)])
    if policy.random_flip:
        flip = rng.random(n) < policy.flip_prob
        x = np.where(flip[:, None, None, None], hflip(x), x)
    return replace(batch, images=np.ascontiguousarray(x, dtype=np.float32))


def iterate_batches(
    dataset: LabeledDataset,
    batch_size: int,
    rng: np.random.Generator | None = None,
    shuffle: bool = False,
    policy: AugmentPolicy | None = None,
) -> Iterator[LabeledBatch]:
    """Yield consecutive batches; shuffling and augmentation draw from ``rng``."""
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    order = np.arange(len(dataset))
    if shuffle:
        order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        batch = LabeledBatch(dataset.images[idx], dataset.labels[idx], dataset.name, dataset.class_count)
        if policy is not None:
            batch = augment(batch, policy, rng)
        yield batch


def batch_count(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
