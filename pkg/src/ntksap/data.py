"""Datasets: synthetic blobs and two-moons, IDX files, Gaussian pruning inputs."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
# MNIST pixel statistics after scaling to [0, 1].
IDX_PIXEL_MEAN = 0.1307
IDX_PIXEL_STD = 0.3081


class IDXError(ValueError):
    pass


class BadMagicError(IDXError):
    pass


class TruncatedFileError(IDXError):
    pass


class CountMismatchError(IDXError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    targets: np.ndarray | None = None  # regression targets, used by the mse loss

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.inputs)
        if n == 0:
            raise ValueError("dataset is empty")
        if self.labels.shape != (n,):
            raise ValueError(f"labels shape {self.labels.shape} does not match {n} inputs")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        t = None if self.targets is None else self.targets[idx]
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.split, t)


def _standardize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return (train - mu) / sd, (test - mu) / sd


def gen_blobs(num_classes: int, n_per_class: int, dim: int, spread: float, seed: int,
              n_test_per_class: int | None = None) -> tuple[Dataset, Dataset]:
    """Gaussian clusters around random unit-norm centers.

    Returns ``(train, test)``; features are standardized with train statistics.
    """
    if num_classes < 2 or n_per_class < 1 or dim < 1 or spread < 0:
        raise ValueError("gen_blobs needs num_classes >= 2, n_per_class >= 1, dim >= 1, spread >= 0")
    n_test = n_per_class if n_test_per_class is None else n_test_per_class
    if n_test < 1:
        raise ValueError("n_test_per_class must be >= 1")
    rng = make_rng(seed, "blobs")
    centers = rng.normal(size=(num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    def draw(n):
        y = np.repeat(np.arange(num_classes), n)
        x = centers[y] + spread * rng.normal(size=(len(y), dim))
        return x, y

    xtr, ytr = draw(n_per_class)
    xte, yte = draw(n_test)
    xtr, xte = _standardize(xtr, xte)
    return (Dataset(xtr, ytr, num_classes, "train"), Dataset(xte, yte, num_classes, "test"))


def gen_two_moons(n: int, noise: float, seed: int, n_test: int | None = None) -> tuple[Dataset, Dataset]:
    """Two interleaving half circles, ``n`` points per split."""
    if n < 2 or noise < 0:
        raise ValueError("gen_two_moons needs n >= 2 and noise >= 0")
    rng = make_rng(seed, "moons")

    def draw(m):
        n_out = m // 2
        n_in = m - n_out
        t_out = np.linspace(0, np.pi, n_out)
        t_in = np.linspace(0, np.pi, n_in)
        x = np.concatenate([
            np.stack([np.cos(t_out), np.sin(t_out)], axis=1),
            np.stack([1 - np.cos(t_in), 1 - np.sin(t_in) - 0.5], axis=1)])
        y = np.concatenate([np.zeros(n_out, np.int64), np.ones(n_in, np.int64)])
        return x + noise * rng.normal(size=x.shape), y

    xtr, ytr = draw(n)
    xte, yte = draw(n if n_test is None else n_test)
    xtr, xte = _standardize(xtr, xte)
    return Dataset(xtr, ytr, 2, "train"), Dataset(xte, yte, 2, "test")


def xor_dataset() -> Dataset:
    x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    return Dataset(x, np.array([0, 1, 1, 0]), 2, "train")


# -- IDX --------------------------------------------------------------------

def _read_idx(path: Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedFileError(f"truncated IDX file {path}: header incomplete")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"bad magic 0x{got:08x} in {path}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFileError(f"truncated IDX file {path}: header incomplete")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = int(np.prod(dims))
    body = raw[head:]
    if len(body) < need:
        raise TruncatedFileError(f"truncated IDX file {path}: {len(body)} of {need} data bytes")
    return dims, body[:need]


def load_idx(images_path: str | Path, labels_path: str | Path, split: str = "train",
             num_classes: int = 10) -> Dataset:
    """Load IDX image/label files.

    Pixels are scaled to [0, 1] then standardized with the fixed MNIST
    constants ``IDX_PIXEL_MEAN`` / ``IDX_PIXEL_STD``.
    """
    idims, ibody = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    ldims, lbody = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    if idims[0] != ldims[0]:
        raise CountMismatchError(f"count mismatch: {idims[0]} images vs {ldims[0]} labels")
    images = np.frombuffer(ibody, dtype=np.uint8).reshape(idims).astype(np.float64) / 255.0
    images = (images - IDX_PIXEL_MEAN) / IDX_PIXEL_STD
    labels = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, num_classes, split)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path,
              labels_path: str | Path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">I", IDX_LABELS_MAGIC) + struct.pack(">I", len(labels)) + labels.tobytes())


# -- pruning inputs ---------------------------------------------------------

def gaussian_batch(shape, seed: int, *stream: int | str) -> np.ndarray:
    """I.i.d. standard normal batch of the given shape."""
    return make_rng(seed, "gaussian", *stream).standard_normal(tuple(shape))


def pruning_subset(data: Dataset, per_class: int = 10, seed: int = 0) -> Dataset:
    """Class-balanced random subset with ``per_class`` samples of every class."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = make_rng(seed, "pruning_subset")
    picks = []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        if len(idx) < per_class:
            raise ValueError(f"class {c} has {len(idx)} samples, need {per_class}")
        picks.append(np.sort(rng.choice(idx, per_class, replace=False)))
    return data.subset(np.concatenate(picks))


def export_csv(data: Dataset, path: str | Path) -> None:
    flat = data.inputs.reshape(len(data), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(flat.shape[1])])
        for y, row in zip(data.labels, flat):
            w.writerow([int(y)] + [repr(float(v)) for v in row])
