"""Dataset containers, IDX / CIFAR-10 binary readers, subsetting and synthetic data.

Pixels are scaled by 1/255 with no further normalization.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .network import round_half_up

__all__ = [
    "Dataset",
    "UnlabeledData",
    "load_idx",
    "read_idx",
    "load_cifar10_binary",
    "load_mnist",
    "binary_digit_subset",
    "split_train_val",
    "synthetic_linear_dataset",
    "CIFAR_RECORD",
]

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass(frozen=True)
class UnlabeledData:
    """Inputs only. The transfer path accepts this type, so labels cannot leak into it."""

    inputs: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class Dataset:
    """Inputs with integer class ids (``targets`` is None) or real-valued ``targets``."""

    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    n_classes: int = 10
    targets: np.ndarray | None = None

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"class ids must lie in [0, {self.n_classes})")
        if self.targets is not None and self.targets.shape[0] != self.labels.shape[0]:
            raise DataError("targets and labels disagree in length")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def unlabeled(self) -> UnlabeledData:
        return UnlabeledData(self.inputs)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.inputs[idx],
            self.labels[idx],
            split or self.split,
            self.n_classes,
            None if self.targets is None else self.targets[idx],
        )


def _read_bytes(path) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DataError(f"corrupt gzip stream in {path}: {exc}") from exc
    return raw


def read_idx(path, expect_magic: int) -> np.ndarray:
    """Parse a big-endian u8 IDX file (optionally gzip-compressed) into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise DataError(f"{path}: IDX magic {magic:#010x}, expected {expect_magic:#010x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(body) != need:
        raise DataError(f"{path}: expected {need} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", n_classes: int = 10) -> Dataset:
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(images / 255.0, labels.astype(np.int64), split, n_classes)


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (root / name).exists():
            return root / name
    raise DataError(f"{root}: no file named {stem}[.gz]")


def load_mnist(root, split: str = "train") -> Dataset:
    """MNIST or Fashion-MNIST in the standard file names under ``root``."""
    root = Path(root)
    prefix = "train" if split in ("train", "val") else "t10k"
    return load_idx(
        _find(root, f"{prefix}-images-idx3-ubyte"), _find(root, f"{prefix}-labels-idx1-ubyte"), split
    )


def _parse_cifar(raw: bytes, name: str) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise DataError(f"{name}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataError(f"{name}: label byte {labels.max()} out of range")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10_binary(path, split: str = "train") -> Dataset:
    """CIFAR-10 binary batches: a single file, or a directory with ``data_batch_*.bin`` / ``test_batch.bin``."""
    path = Path(path)
    if path.is_dir():
        names = sorted(path.glob("data_batch_*.bin")) if split != "test" else [path / "test_batch.bin"]
        if not names or not all(p.exists() for p in names):
            raise DataError(f"{path}: no CIFAR-10 {split} batches found")
    else:
        names = [path]
    xs, ys = [], []
    for p in names:
        x, y = _parse_cifar(_read_bytes(p), str(p))
        xs.append(x)
        ys.append(y)
    return Dataset(np.concatenate(xs) / 255.0, np.concatenate(ys), split, 10)


def binary_digit_subset(ds: Dataset, classes=(0, 1), per_class: int = 250) -> Dataset:
    """First ``per_class`` samples of each class in dataset order, with one-hot regression targets."""
    if per_class <= 0:
        raise DataError("per_class must be positive")
    picks = []
    for c in classes:
        idx = np.flatnonzero(ds.labels == c)[:per_class]
        if idx.size < per_class:
            raise DataError(f"class {c} has only {idx.size} samples, need {per_class}")
        picks.append(idx)
    idx = np.sort(np.concatenate(picks))
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[int(c)] for c in ds.labels[idx]], dtype=np.int64)
    targets = np.eye(len(classes))[labels]
    return Dataset(ds.inputs[idx], labels, ds.split, len(classes), targets)


def split_train_val(ds: Dataset, val_fraction: float = 0.10, rng: np.random.Generator | None = None):
    """Seeded shuffle, then the last ``round(n * val_fraction)`` shuffled samples form the validation split."""
    if not 0.0 <= val_fraction < 1.0:
        raise DataError("val_fraction must be in [0, 1)")
    n = len(ds)
    order = (rng if rng is not None else np.random.default_rng(0)).permutation(n)
    n_val = round_half_up(n * val_fraction)
    return ds.subset(order[: n - n_val], "train"), ds.subset(order[n - n_val:], "val")


def synthetic_linear_dataset(
    d: int,
    n: int,
    support_mask,
    rng: np.random.Generator,
    noise: float = 0.0,
    coef: np.ndarray | None = None,
) -> tuple[Dataset, np.ndarray]:
    """Gaussian inputs zeroed off ``support_mask``; targets ``y = a.x + noise`` for a seeded ``a``.

    Returns the dataset (targets of shape ``(n, 1)``) and the ground-truth ``a``.
    """
    support = np.asarray(support_mask, dtype=np.float64)
    if support.shape != (d,):
        raise ValueError(f"support_mask must have length {d}")
    x = np.where(support > 0, rng.standard_normal((n, d)), 0.0)
    a = rng.standard_normal(d) if coef is None else np.asarray(coef, dtype=np.float64)
    y = x @ a
    if noise:
        y = y + noise * rng.standard_normal(n)
    return Dataset(x, np.zeros(n, dtype=np.int64), "train", 1, y[:, None]), a
