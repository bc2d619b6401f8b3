"""Datasets: MNIST IDX files and synthetic Gaussian blobs."""
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (ConfigError, DataError, IdxCountMismatchError, IdxMagicError,
                     IdxTruncatedError, InfeasiblePackingError)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    n_classes: int = 10
    split: str = "train"
    centers: np.ndarray = None  # class centers, for synthetic data

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.n_classes < 2:
            raise DataError("a dataset needs at least two classes")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels outside [0, {self.n_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("image values outside [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.n_classes, self.split,
                       self.centers)

    def head(self, n):
        return self.subset(np.arange(min(n, len(self))))


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def _parse_idx(raw, magic, what):
    if len(raw) < 4:
        raise IdxTruncatedError(f"{what} file shorter than its magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{what} file has magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise IdxTruncatedError(f"{what} file truncated inside its header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    count = int(np.prod(dims, dtype=np.int64))
    body = raw[4 + 4 * ndim:]
    if len(body) < count:
        raise IdxTruncatedError(f"{what} file holds {len(body)} bytes, header promises {count}")
    return np.frombuffer(body, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path, labels_path, n_classes=10, split="train", dtype=np.float32):
    """Parse an IDX image/label pair; pixels are scaled by 1/255."""
    images = _parse_idx(_read(images_path), IMAGE_MAGIC, "image")
    labels = _parse_idx(_read(labels_path), LABEL_MAGIC, "label")
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = (images.astype(dtype) / dtype(255))[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), n_classes, split)


def write_idx(images_path, labels_path, dataset):
    """Write single-channel images and labels as IDX (used for fixtures)."""
    imgs = np.asarray(dataset.images)
    if imgs.shape[1] != 1:
        raise DataError("IDX images must be single-channel")
    px = np.round(imgs[:, 0] * 255).astype(np.uint8)
    n, h, w = px.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        f.write(px.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(np.asarray(dataset.labels, dtype=np.uint8).tobytes())


def mnist_paths(root, split="train"):
    stem = "train" if split == "train" else "t10k"
    for img, lab in ((f"{stem}-images-idx3-ubyte", f"{stem}-labels-idx1-ubyte"),
                     (f"{stem}-images.idx3-ubyte", f"{stem}-labels.idx1-ubyte")):
        ip, lp = os.path.join(root, img), os.path.join(root, lab)
        if os.path.exists(ip) and os.path.exists(lp):
            return ip, lp
    raise DataError(f"no MNIST {split} files under {root}")


def load_mnist(root, split="train"):
    return load_idx(*mnist_paths(root, split), split=split)


def make_blobs(n_per_class, n_classes, dim, spread, rng, max_tries=10_000):
    """Isotropic Gaussian classes in ``[0, 1]^dim``, stored as (N, 1, 1, dim).

    Class centers are at least ``6 * spread`` apart and keep a ``3 * spread``
    margin from the box walls, so clipping rarely moves a point.
    """
    if n_classes < 2 or dim < 1 or n_per_class < 0 or spread < 0:
        raise ConfigError("make_blobs needs n_classes >= 2, dim >= 1, spread >= 0")
    gap = max(6 * spread, 1e-3)
    margin = min(3 * spread, 0.5)
    if margin * 2 >= 1:
        raise InfeasiblePackingError(f"spread {spread} leaves no room inside the unit box")
    centers = []
    tries = 0
    while len(centers) < n_classes:
        tries += 1
        if tries > max_tries:
            raise InfeasiblePackingError(
                f"could not place {n_classes} centers {gap:.3g} apart in {dim} dimensions")
        c = rng.uniform(margin, 1 - margin, size=dim)
        if all(np.linalg.norm(c - o) >= gap for o in centers):
            centers.append(c)
    centers = np.array(centers)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = centers[labels] + spread * rng.standard_normal((len(labels), dim))
    x = np.clip(x, 0, 1)
    return Dataset(x[:, None, None, :], labels, n_classes, "train", centers)
