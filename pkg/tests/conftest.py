import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest

from ntt.network import Conv2D, Dense, Flatten, MaxPool, ReLU, build, mlp

MNIST_DIR = Path(os.environ.get("NTT_MNIST_DIR", "/root/data/mnist"))

# criterion number -> (ok, detail); printed in the terminal summary
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record_criterion(number: int, ok: bool | None, detail: str) -> None:
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    ACCEPTANCE[number] = (status, detail)
    print(f"criterion {number}: {status} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")


def write_idx(path: Path, arr: np.ndarray, compress: bool) -> None:
    magic = 0x0800 | arr.ndim
    blob = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.astype(np.uint8).tobytes()
    if compress:
        path = path.with_name(path.name + ".gz")
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def fake_digits(n: int, rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
    """Noisy 28x28 images with a bright class-specific band so the task is learnable."""
    img = rng.integers(0, 60, size=(n, 28, 28))
    for i, c in enumerate(labels):
        img[i, 2 + 2 * c: 5 + 2 * c, 4:24] = 230
    return img.astype(np.uint8)


@pytest.fixture(scope="session")
def fake_mnist(tmp_path_factory) -> Path:
    """MNIST-layout directory: gzip-compressed train files, plain test files.

    The first 500 training labels alternate 0/1 so the toy subset exists.
    """
    root = tmp_path_factory.mktemp("fake_mnist")
    rng = np.random.default_rng(1234)
    train_labels = np.concatenate([np.arange(500) % 2, np.arange(100) % 10]).astype(np.uint8)
    test_labels = (np.arange(100) % 10).astype(np.uint8)
    write_idx(root / "train-images-idx3-ubyte", fake_digits(600, rng, train_labels), True)
    write_idx(root / "train-labels-idx1-ubyte", train_labels, True)
    write_idx(root / "t10k-images-idx3-ubyte", fake_digits(100, rng, test_labels), False)
    write_idx(root / "t10k-labels-idx1-ubyte", test_labels, False)
    return root


@pytest.fixture
def small_mlp():
    return mlp([8, 16, 16, 2])


@pytest.fixture
def small_cnn():
    arch = [Conv2D(3, 3, 1, 3, padding="same"), ReLU(), MaxPool(2, 2), Flatten(), Dense(3 * 3 * 3, 4), ReLU(),
            Dense(4, 3)]
    return build(arch, (1, 6, 6), name="tiny-cnn")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
