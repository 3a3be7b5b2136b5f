import gzip
import struct

import numpy as np
import pytest

from conftest import MNIST_DIR, write_idx
from ntt.data import (
    CIFAR_RECORD,
    Dataset,
    binary_digit_subset,
    load_cifar10_binary,
    load_idx,
    load_mnist,
    read_idx,
    split_train_val,
    synthetic_linear_dataset,
)
from ntt.errors import DataError
from ntt.network import make_rng


def test_idx_header_and_shape(tmp_path):
    arr = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "img", arr, False)
    raw = (tmp_path / "img").read_bytes()
    assert raw[:4] == bytes([0, 0, 8, 3])
    np.testing.assert_array_equal(read_idx(tmp_path / "img", 0x803), arr)


def test_gzip_detected_by_magic_not_name(tmp_path):
    arr = np.arange(12, dtype=np.uint8).reshape(3, 4)
    blob = struct.pack(">III", 0x802, 3, 4) + arr.tobytes()
    (tmp_path / "plain.gz").write_bytes(blob)  # misleading suffix, no compression
    (tmp_path / "packed").write_bytes(gzip.compress(blob))  # compressed, no suffix
    np.testing.assert_array_equal(read_idx(tmp_path / "plain.gz", 0x802), arr)
    np.testing.assert_array_equal(read_idx(tmp_path / "packed", 0x802), arr)


def test_idx_errors(tmp_path):
    arr = np.zeros((2, 3), dtype=np.uint8)
    write_idx(tmp_path / "a", arr, False)
    with pytest.raises(DataError):
        read_idx(tmp_path / "a", 0x803)
    (tmp_path / "short").write_bytes(struct.pack(">III", 0x802, 3, 4) + b"\x00" * 5)
    with pytest.raises(DataError):
        read_idx(tmp_path / "short", 0x802)
    (tmp_path / "bad.gz").write_bytes(b"\x1f\x8bnot really gzip")
    with pytest.raises(DataError):
        read_idx(tmp_path / "bad.gz", 0x802)
    with pytest.raises(DataError):
        read_idx(tmp_path / "missing", 0x802)


def test_load_idx_pairs_and_scales(tmp_path):
    write_idx(tmp_path / "i", np.full((3, 2, 2), 255, dtype=np.uint8), False)
    write_idx(tmp_path / "l", np.array([1, 2, 3], dtype=np.uint8), True)
    ds = load_idx(tmp_path / "i", tmp_path / "l.gz")
    assert ds.inputs.max() == 1.0 and list(ds.labels) == [1, 2, 3]
    write_idx(tmp_path / "l2", np.array([1, 2], dtype=np.uint8), False)
    with pytest.raises(DataError):
        load_idx(tmp_path / "i", tmp_path / "l2")


def test_load_mnist_layout(fake_mnist):
    tr = load_mnist(fake_mnist, "train")
    te = load_mnist(fake_mnist, "test")
    assert tr.inputs.shape == (600, 28, 28) and te.inputs.shape == (100, 28, 28)
    with pytest.raises(DataError):
        load_mnist(fake_mnist / "nowhere")


@pytest.mark.skipif(not (MNIST_DIR / "train-labels-idx1-ubyte").exists(), reason="MNIST files not available")
def test_reference_mnist_files():
    ds = load_mnist(MNIST_DIR, "train")
    assert ds.inputs.shape == (60000, 28, 28)
    toy = binary_digit_subset(ds)
    assert len(toy) == 500 and np.bincount(toy.labels).tolist() == [250, 250]


def test_cifar_binary(tmp_path):
    assert CIFAR_RECORD == 3073
    rng = np.random.default_rng(0)
    recs = rng.integers(0, 256, size=(5, CIFAR_RECORD), dtype=np.uint8)
    recs[:, 0] = [0, 3, 9, 1, 2]
    (tmp_path / "data_batch_1.bin").write_bytes(recs[:3].tobytes())
    (tmp_path / "data_batch_2.bin").write_bytes(gzip.compress(recs[3:].tobytes()))
    (tmp_path / "test_batch.bin").write_bytes(recs[:1].tobytes())
    ds = load_cifar10_binary(tmp_path, "train")
    assert ds.inputs.shape == (5, 3, 32, 32) and list(ds.labels) == [0, 3, 9, 1, 2]
    np.testing.assert_allclose(ds.inputs[1, 0, 0, :3], recs[1, 1:4] / 255.0)
    assert len(load_cifar10_binary(tmp_path, "test")) == 1
    (tmp_path / "odd.bin").write_bytes(recs.tobytes()[:-1])
    with pytest.raises(DataError):
        load_cifar10_binary(tmp_path / "odd.bin")
    bad = recs[:1].copy()
    bad[0, 0] = 10
    (tmp_path / "bad.bin").write_bytes(bad.tobytes())
    with pytest.raises(DataError):
        load_cifar10_binary(tmp_path / "bad.bin")


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), np.zeros(2, dtype=np.int64))
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), np.array([0, 10]), n_classes=10)


def test_binary_subset(fake_mnist):
    ds = binary_digit_subset(load_mnist(fake_mnist))
    assert len(ds) == 500 and np.bincount(ds.labels).tolist() == [250, 250]
    np.testing.assert_array_equal(ds.targets, np.eye(2)[ds.labels])
    with pytest.raises(DataError):
        binary_digit_subset(load_mnist(fake_mnist), classes=(3, 4))


def test_split_sizes_and_disjointness():
    ds = Dataset(np.arange(60000)[:, None].astype(float), np.zeros(60000, dtype=np.int64))
    tr, val = split_train_val(ds, 0.1, make_rng(0, "split"))
    assert (len(tr), len(val)) == (54000, 6000)
    assert len(np.intersect1d(tr.inputs[:, 0], val.inputs[:, 0])) == 0
    tr2, _ = split_train_val(ds, 0.1, make_rng(0, "split"))
    assert np.array_equal(tr.inputs, tr2.inputs)
    with pytest.raises(DataError):
        split_train_val(ds, 1.0)


def test_synthetic_linear_dataset():
    support = np.array([1, 0, 1, 0, 1.0])
    ds, a = synthetic_linear_dataset(5, 20, support, np.random.default_rng(0))
    assert np.all(ds.inputs[:, support == 0] == 0)
    assert not np.any(np.signbit(ds.inputs[:, support == 0]))
    np.testing.assert_allclose(ds.targets[:, 0], ds.inputs @ a)
    with pytest.raises(ValueError):
        synthetic_linear_dataset(4, 3, support, np.random.default_rng(0))
