import os
import struct

import numpy as np
import pytest

from sonetlab.data import (DataFormatError, Dataset, downsample2, load_cifar_binary, load_idx,
                           make_synthetic, mnist_subset)


def _idx(path, magic, dims, payload):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims)
                     + bytes(payload))
    return path


def test_idx_scaling(tmp_path):
    img = _idx(tmp_path / "img", 0x803, (1, 2, 2), [0, 255, 0, 255])
    lab = _idx(tmp_path / "lab", 0x801, (1,), [7])
    ds = load_idx(img, lab)
    assert ds.images.shape == (1, 1, 2, 2)
    assert np.array_equal(ds.images[0, 0], [[0, 1], [0, 1]])
    assert ds.labels.tolist() == [7]


def test_idx_truncated_names_offset(tmp_path):
    img = _idx(tmp_path / "img", 0x803, (2, 2, 2), [1, 2, 3])
    with pytest.raises(DataFormatError, match="byte offset 19"):
        load_idx(img)
    (tmp_path / "tiny").write_bytes(b"\x00\x00")
    with pytest.raises(DataFormatError, match="byte offset 2"):
        load_idx(tmp_path / "tiny")


def test_idx_bad_magic(tmp_path):
    img = _idx(tmp_path / "img", 0x802, (1, 1), [0])
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(img)


@pytest.mark.skipif(not os.environ.get("SONETLAB_MNIST_DIR"), reason="needs MNIST IDX files")
def test_full_mnist_header():
    ds = load_idx(os.path.join(os.environ["SONETLAB_MNIST_DIR"], "train-images-idx3-ubyte"))
    assert ds.images.shape == (60000, 1, 28, 28)


def test_cifar_binary(tmp_path):
    (tmp_path / "one.bin").write_bytes(bytes([7]) + bytes([255]) * 3072)
    ds = load_cifar_binary(tmp_path / "one.bin")
    assert ds.images.shape == (1, 3, 32, 32) and np.all(ds.images == 1.0)
    assert ds.labels.tolist() == [7]
    (tmp_path / "empty.bin").write_bytes(b"")
    with pytest.raises(DataFormatError):
        load_cifar_binary(tmp_path / "empty.bin")
    (tmp_path / "bad.bin").write_bytes(bytes(3074))
    with pytest.raises(DataFormatError):
        load_cifar_binary(tmp_path / "bad.bin")


def test_blobs_bayes_accuracy():
    ds = make_synthetic("blobs", 50_000, seed=0)
    p = ds.images[:, :, 0, 0]
    # the optimal boundary is the anti-diagonal through the centre of the square
    assert ((p.sum(axis=1) > 1.0) == ds.labels).mean() > 0.95


def test_synthetic_determinism_and_balance():
    a, b = make_synthetic("rings", 50, seed=3), make_synthetic("rings", 50, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    two = make_synthetic("blobs", 2, seed=0)
    assert sorted(two.labels.tolist()) == [0, 1]
    img = make_synthetic("blobs", 10, seed=0, image=True)
    assert img.images.shape == (10, 1, 4, 4)
    assert img.images.min() >= 0 and img.images.max() <= 1
    with pytest.raises(ValueError):
        make_synthetic("blobs", 1)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1, 2, 2), 1.5), [0])
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2)), [0])
    ds = Dataset(np.zeros((4, 1, 2, 2)), [0, 1, 2, 1])
    assert ds.classes == 3 and len(ds.head(2)) == 2


def test_downsample2():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert np.array_equal(downsample2(x)[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_mnist_subset():
    tr, te = mnist_subset(400, 100, seed=0, downsample=True)
    assert tr.images.shape == (400, 1, 14, 14) and len(te) == 100
    assert np.bincount(tr.labels).tolist() == [40] * 10
    assert tr.images.min() >= 0 and tr.images.max() <= 1
    tr2, _ = mnist_subset(400, 100, seed=0, downsample=True)
    assert np.array_equal(tr.images, tr2.images)
    with pytest.raises(ValueError):
        mnist_subset(5000, 1000)
