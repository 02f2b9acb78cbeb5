import gzip

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from bcnn.data import (FormatError, decode_checkpoint, decode_cifar, detect_dataset, encode_checkpoint,
                       load_checkpoint, load_cifar10, load_cifar100, load_mnist, parse_idx,
                       read_metrics_csv, scale_pixels, write_metrics_csv)
from bcnn.hierarchy import shipped_tree
from bcnn.objective import MetricsRecord

from fakes import idx_bytes, write_fake_cifar10, write_fake_cifar100, write_fake_mnist


def test_pixel_scaling():
    out = scale_pixels(np.array([0, 1, 128, 255], dtype=np.uint8))
    assert out.dtype == np.float32
    assert out.tolist() == [0.0, np.float32(1 / 255), np.float32(128 / 255), 1.0]


def test_parse_idx_shapes_and_errors():
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    raw = idx_bytes(arr, 2051)
    assert_array_equal(parse_idx(raw, 2051), arr)
    with pytest.raises(FormatError, match="magic"):
        parse_idx(raw, 2049)
    with pytest.raises(FormatError, match="offset"):
        parse_idx(raw + b"\0", 2051)


def test_mnist_loader_reads_fakes(tmp_path):
    written = write_fake_mnist(tmp_path, 12, 5)
    train, test = load_mnist(tmp_path)
    assert train.images.shape == (12, 28, 28, 1) and test.images.shape == (5, 28, 28, 1)
    images, labels = written["train"]
    assert_array_equal(train.fine_labels, labels)
    assert_array_equal(train.images[..., 0], scale_pixels(images))
    assert train.coarse_labels is None and train.split == "train"


def test_mnist_loader_reads_gzip(tmp_path):
    write_fake_mnist(tmp_path, 4, 3)
    for p in list(tmp_path.iterdir()):
        (p.parent / (p.name + ".gz")).write_bytes(gzip.compress(p.read_bytes()))
        p.unlink()
    train, test = load_mnist(tmp_path)
    assert len(train) == 4 and len(test) == 3
    assert detect_dataset(tmp_path) == "mnist"


def test_mnist_image_label_count_mismatch(tmp_path):
    write_fake_mnist(tmp_path, 4, 3)
    (tmp_path / "train-labels-idx1-ubyte").write_bytes(idx_bytes(np.zeros(5), 2049))
    with pytest.raises(FormatError):
        load_mnist(tmp_path)


def test_cifar_plane_order():
    raw = bytearray(2 + 3072)
    raw[0], raw[1] = 7, 42
    # red plane row 1 col 2, green plane row 0 col 0, blue plane row 31 col 31
    raw[2 + 0 * 1024 + 1 * 32 + 2] = 255
    raw[2 + 1 * 1024] = 51
    raw[2 + 2 * 1024 + 31 * 32 + 31] = 102
    labels, images = decode_cifar(bytes(raw), 2)
    assert labels.tolist() == [[7, 42]]
    assert images.shape == (1, 32, 32, 3)
    assert images[0, 1, 2, 0] == 1.0
    assert images[0, 0, 0, 1] == np.float32(0.2)
    assert images[0, 31, 31, 2] == np.float32(0.4)
    assert np.count_nonzero(images) == 3


def test_cifar10_loader_reads_fakes(tmp_path):
    written = write_fake_cifar10(tmp_path, per_batch=3, n_test=4)
    train, test = load_cifar10(tmp_path)
    assert len(train) == 15 and len(test) == 4
    assert_array_equal(train.fine_labels[:3], written["data_batch_1.bin"][0][:, 0])
    assert_array_equal(train.fine_labels[12:], written["data_batch_5.bin"][0][:, 0])
    assert_array_equal(test.images, scale_pixels(written["test_batch.bin"][1]))
    assert detect_dataset(tmp_path) == "cifar10"


def test_cifar100_loader_reads_both_labels(tmp_path):
    tree = shipped_tree("cifar100")
    written = write_fake_cifar100(tmp_path, tree, n_train=6, n_test=3)
    train, test = load_cifar100(tmp_path)
    assert_array_equal(train.coarse_labels, written["train.bin"][0][:, 0])
    assert_array_equal(train.fine_labels, written["train.bin"][0][:, 1])
    assert len(test) == 3
    assert detect_dataset(tmp_path) == "cifar100"


def test_cifar10_rejects_out_of_range_label(tmp_path):
    write_fake_cifar10(tmp_path, per_batch=2, n_test=2)
    raw = bytearray((tmp_path / "test_batch.bin").read_bytes())
    raw[0] = 10
    (tmp_path / "test_batch.bin").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="outside"):
        load_cifar10(tmp_path)


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)
    with pytest.raises(FileNotFoundError):
        detect_dataset(tmp_path)


def test_dataset_subset_takes_leading_samples(tmp_path):
    write_fake_mnist(tmp_path, 10, 2)
    train, _ = load_mnist(tmp_path)
    sub = train.subset(4)
    assert_array_equal(sub.fine_labels, train.fine_labels[:4])
    assert train.subset(None) is train and train.subset(50) is train


# -- truncation fuzz ---------------------------------------------------------------

_IDX = idx_bytes(np.arange(2 * 28 * 28).reshape(2, 28, 28) % 256, 2051)
_CIFAR = bytes(np.random.default_rng(0).integers(0, 256, size=3 * 3074, dtype=np.uint8))
_CKPT = encode_checkpoint({"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3),
                           "b.bias": np.ones(2, dtype=np.float64)})


@settings(max_examples=1000, deadline=None)
@given(st.data())
def test_truncated_files_raise_format_errors(data):
    n = data.draw(st.integers(0, len(_IDX) - 1))
    with pytest.raises(FormatError):
        parse_idx(_IDX[:n], 2051)
    n = data.draw(st.integers(0, len(_CKPT) - 1))
    with pytest.raises(FormatError):
        decode_checkpoint(_CKPT[:n])
    # a cut on a record boundary is a valid, shorter file
    n = data.draw(st.integers(0, len(_CIFAR) - 1).filter(lambda n: n % 3074))
    with pytest.raises(FormatError, match="offset"):
        decode_cifar(_CIFAR[:n], 2)


# -- checkpoints ---------------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"x": rng.standard_normal((3, 4)).astype(np.float32),
               "y": rng.standard_normal(5), "scalar": np.array(2.5, dtype=np.float32)}
    path = tmp_path / "m.ckpt"
    path.write_bytes(encode_checkpoint(tensors))
    back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_checkpoint_errors():
    with pytest.raises(FormatError, match="magic"):
        decode_checkpoint(b"XXXX" + _CKPT[4:])
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(_CKPT + b"\0")
    with pytest.raises(FormatError, match="version"):
        decode_checkpoint(_CKPT[:4] + b"\x09" + _CKPT[5:])
    with pytest.raises(TypeError):
        encode_checkpoint({"i": np.arange(3)})


# -- metrics CSV -----------------------------------------------------------------------

def test_metrics_csv_round_trip(tmp_path):
    history = [MetricsRecord(epoch=e, lr=0.01 / e, weights=(0.98, 0.02) if e == 1 else (0.6, 0.4),
                             train_loss=1 / 3 + e, train_acc=(0.1 * e, 0.7), test_acc=(0.123456789012, 2 / 3))
               for e in (1, 2)]
    path = tmp_path / "history.csv"
    write_metrics_csv(history, path)
    assert path.read_text().splitlines()[0] == \
        "epoch,lr,A_1,A_2,train_loss,train_acc_1,train_acc_2,test_acc_1,test_acc_2"
    back = read_metrics_csv(path)
    for a, b in zip(history, back):
        assert a.epoch == b.epoch and a.weights == b.weights
        np.testing.assert_allclose([a.lr, a.train_loss, *a.train_acc, *a.test_acc],
                                   [b.lr, b.train_loss, *b.train_acc, *b.test_acc], rtol=1e-9)
    with pytest.raises(ValueError):
        write_metrics_csv([], path)
