"""Dataset ingestion: MNIST IDX, CIFAR-10 binary batches, synthetic toys."""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, c, h, w) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], split or self.split)

    def head(self, n: int) -> "Dataset":
        return self.subset(slice(0, n))


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated at byte offset {len(raw)} (no IDX header)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: truncated at byte offset {len(raw)}, header needs {head}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = head + int(np.prod(dims))
    if len(raw) < need:
        raise DataFormatError(
            f"{path}: truncated at byte offset {len(raw)}, expected {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need - head, offset=head).reshape(dims)


def load_idx(path, labels_path=None, split: str = "train") -> Dataset:
    """Read an IDX image file (and optional label file) into a Dataset.

    Without labels every label is 0. Images become ``(N, 1, h, w)``.
    """
    arr = _read_idx(path)
    if arr.ndim != 3:
        raise DataFormatError(f"{path}: expected a 3-D image file, got dims {arr.shape}")
    images = arr.astype(np.float64)[:, None] / 255.0
    if labels_path is None:
        labels = np.zeros(len(images), dtype=np.int64)
    else:
        labels = _read_idx(labels_path)
        if labels.ndim != 1:
            raise DataFormatError(f"{labels_path}: expected a 1-D label file")
    return Dataset(images, labels, split)


def load_cifar_binary(path, split: str = "train") -> Dataset:
    raw = Path(path).read_bytes()
    if not raw or len(raw) % CIFAR_RECORD:
        raise DataFormatError(
            f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, rec[:, 0].astype(np.int64), split)


def make_synthetic(kind: str = "blobs", n: int = 200, seed: int = 0, image: bool = False,
                   margin: float = 2.0) -> Dataset:
    """Balanced two-class toy data.

    ``blobs``: unit-variance Gaussians on the diagonal, each centre ``margin``
    away from the separating line (Bayes accuracy ``Phi(margin)``). ``rings``: radius 1 vs radius 2 with small radial noise. Points
    are squashed into ``[0, 1]`` by a fixed affine map; ``image=True`` embeds
    each 2-D point into a 1x4x4 image (a 2x2 block per coordinate quadrant).
    """
    if n < 2:
        raise ValueError("need n >= 2")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    if kind == "blobs":
        centre = (2.0 * y[:, None] - 1.0) * margin / np.sqrt(2.0)
        pts = centre + rng.standard_normal((n, 2))
        scale = 2.0 * (margin + 4.0)
    elif kind == "rings":
        theta = rng.uniform(0, 2 * np.pi, n)
        r = 1.0 + y + 0.1 * rng.standard_normal(n)
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        scale = 6.0
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    pts = np.clip(0.5 + pts / scale, 0.0, 1.0)
    if image:
        img = np.zeros((n, 1, 4, 4))
        img[:, 0, :2, :2] = pts[:, 0, None, None]
        img[:, 0, 2:, 2:] = pts[:, 1, None, None]
        img[:, 0, :2, 2:] = 1 - pts[:, 0, None, None]
        img[:, 0, 2:, :2] = 1 - pts[:, 1, None, None]
        return Dataset(img, y)
    return Dataset(pts[:, :, None, None], y)


def downsample2(images: np.ndarray) -> np.ndarray:
    """2x2 mean pooling over the spatial axes."""
    n, c, h, w = images.shape
    return images[:, :, :h - h % 2, :w - w % 2].reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _mnist_arrays():
    root = os.environ.get("SONETLAB_MNIST_DIR")
    if root:
        root = Path(root)
        for img, lab in (("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                         ("train-images.idx3-ubyte", "train-labels.idx1-ubyte")):
            if (root / img).exists():
                ds = load_idx(root / img, root / lab)
                return ds.images, ds.labels
        logger.warning("no IDX files under %s, falling back to the bundled subset", root)
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    return X.reshape(-1, 1, 28, 28) / 255.0, y.astype(np.int64)


def mnist_subset(n_train: int = 4000, n_test: int = 1000, seed: int = 0,
                 downsample: bool = False) -> tuple[Dataset, Dataset]:
    """Stratified shuffled train/test split of MNIST digits.

    Reads IDX files from ``$SONETLAB_MNIST_DIR`` when set, otherwise the 5000
    digit sample shipped with mlxtend (500 per class, stored class by class).
    """
    images, labels = _mnist_arrays()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    # interleave classes so any prefix is close to balanced
    by_class = [order[labels[order] == c] for c in np.unique(labels)]
    rank = np.empty(len(labels), dtype=np.int64)
    for idx in by_class:
        rank[idx] = np.arange(len(idx))
    order = order[np.lexsort((labels[order], rank[order]))]
    if n_train + n_test > len(order):
        raise ValueError(f"asked for {n_train + n_test} examples, only {len(order)} available")
    if downsample:
        images = downsample2(images)
    train = Dataset(images[order[:n_train]], labels[order[:n_train]], "train")
    test = Dataset(images[order[n_train:n_train + n_test]],
                   labels[order[n_train:n_train + n_test]], "test")
    return train, test
