"""Dataset decoders (MNIST IDX, CIFAR binary), checkpoints and metrics CSV."""

import csv
import gzip
import io
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .objective import MetricsRecord


class FormatError(ValueError):
    """A file's bytes disagree with the layout it claims to have."""


# exact value / 255 in double precision, then narrowed
_PIXEL_LUT = (np.arange(256, dtype=np.float64) / 255.0).astype(np.float32)


def scale_pixels(raw):
    return _PIXEL_LUT[np.asarray(raw, dtype=np.uint8)]


@dataclass
class Dataset:
    images: np.ndarray          # (N, H, W, C) float32 in [0, 1]
    fine_labels: np.ndarray     # (N,) int64
    coarse_labels: np.ndarray = None
    split: str = ""

    def __post_init__(self):
        n = self.images.shape[0]
        if self.fine_labels.shape != (n,):
            raise ValueError(f"{n} images but {self.fine_labels.shape[0]} labels")
        if self.coarse_labels is not None and self.coarse_labels.shape != (n,):
            raise ValueError("coarse labels do not match the image count")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, limit):
        """First ``limit`` samples (or all of them when limit is None)."""
        if limit is None or limit >= len(self):
            return self
        coarse = None if self.coarse_labels is None else self.coarse_labels[:limit]
        return Dataset(self.images[:limit], self.fine_labels[:limit], coarse, self.split)


def _read_bytes(path):
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read(), path
    return path.read_bytes(), path


def parse_idx(raw, expected_magic, name="<idx>"):
    """Decode an IDX byte string into a uint8 array of its declared shape."""
    if len(raw) < 4:
        raise FormatError(f"{name}: truncated header at byte offset {len(raw)}")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{name}: magic {magic} at byte offset 0, expected {expected_magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{name}: truncated header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    if any(d < 0 for d in dims):
        raise FormatError(f"{name}: negative dimension in header")
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise FormatError(f"{name}: payload ends at byte offset {len(raw)}, header implies {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_dir(directory, marker, subdirs):
    directory = Path(directory)
    for sub in ("",) + subdirs:
        d = directory / sub if sub else directory
        if (d / marker).exists() or (d / (marker + ".gz")).exists():
            return d
    raise FileNotFoundError(f"{marker} not found under {directory}")


def load_mnist(directory):
    d = _find_dir(directory, MNIST_FILES["train"][0], ("mnist", "MNIST", "MNIST/raw"))
    out = []
    for split, (img_name, lbl_name) in MNIST_FILES.items():
        raw, p = _read_bytes(d / img_name)
        images = parse_idx(raw, 2051, str(p))
        raw, p = _read_bytes(d / lbl_name)
        labels = parse_idx(raw, 2049, str(p))
        if images.shape[0] != labels.shape[0]:
            raise FormatError(f"{split}: {images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and labels.max() > 9:
            raise FormatError(f"{p}: label {labels.max()} outside 0..9")
        out.append(Dataset(scale_pixels(images)[..., None], labels.astype(np.int64), None, split))
    return tuple(out)


def decode_cifar(raw, label_bytes, name="<cifar>"):
    """Split CIFAR records into label columns and (N, 32, 32, 3) images.

    Each record is ``label_bytes`` label bytes followed by the red, green and
    blue 32x32 planes.
    """
    rec = label_bytes + 3072
    if len(raw) % rec:
        raise FormatError(f"{name}: {len(raw)} bytes is not a multiple of the {rec}-byte record "
                          f"(trailing record starts at byte offset {len(raw) - len(raw) % rec})")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, :label_bytes].astype(np.int64)
    planes = arr[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return labels, scale_pixels(planes)


def load_cifar10(directory):
    d = _find_dir(directory, "data_batch_1.bin", ("cifar-10-batches-bin", "cifar10/cifar-10-batches-bin"))
    parts = []
    for names, split in ((["data_batch_%d.bin" % i for i in range(1, 6)], "train"), (["test_batch.bin"], "test")):
        labels, images = [], []
        for n in names:
            raw, p = _read_bytes(d / n)
            lab, img = decode_cifar(raw, 1, str(p))
            if lab.size and lab.max() > 9:
                raise FormatError(f"{p}: label {lab.max()} outside 0..9")
            labels.append(lab[:, 0])
            images.append(img)
        parts.append(Dataset(np.concatenate(images), np.concatenate(labels), None, split))
    return tuple(parts)


def load_cifar100(directory):
    d = _find_dir(directory, "train.bin", ("cifar-100-binary", "cifar100/cifar-100-binary"))
    parts = []
    for name in ("train", "test"):
        raw, p = _read_bytes(d / f"{name}.bin")
        lab, img = decode_cifar(raw, 2, str(p))
        coarse, fine = lab[:, 0], lab[:, 1]
        if fine.size and (fine.max() > 99 or coarse.max() > 19):
            raise FormatError(f"{p}: label outside the 100 fine / 20 coarse classes")
        parts.append(Dataset(img, fine, coarse, name))
    return tuple(parts)


LOADERS = {"mnist": load_mnist, "cifar10": load_cifar10, "cifar100": load_cifar100}


def detect_dataset(directory):
    """Guess which dataset a directory holds from its file names."""
    for kind, marker, subs in (
            ("mnist", MNIST_FILES["train"][0], ("mnist", "MNIST", "MNIST/raw")),
            ("cifar10", "data_batch_1.bin", ("cifar-10-batches-bin", "cifar10/cifar-10-batches-bin")),
            ("cifar100", "train.bin", ("cifar-100-binary", "cifar100/cifar-100-binary"))):
        try:
            _find_dir(directory, marker, subs)
            return kind
        except FileNotFoundError:
            continue
    raise FileNotFoundError(f"no MNIST or CIFAR files found under {directory}")


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"BCNN"
CKPT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_checkpoint(tensors):
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODE_FOR:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        code = _CODE_FOR[arr.dtype]
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())
    return b"".join(chunks)


def decode_checkpoint(raw, name="<checkpoint>"):
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{name}: truncated at byte offset {len(raw)} (needed {pos + n})")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise FormatError(f"{name}: bad magic at byte offset 0")
    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise FormatError(f"{name}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (length,) = struct.unpack("<H", take(2))
        key = take(length).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPE_CODES:
            raise FormatError(f"{name}: unknown dtype code {code} at byte offset {pos - 2}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _DTYPE_CODES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(size), dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        if key in tensors:
            raise FormatError(f"{name}: duplicate tensor {key!r}")
        tensors[key] = arr
    if pos != len(raw):
        raise FormatError(f"{name}: {len(raw) - pos} unexpected trailing bytes at byte offset {pos}")
    return tensors


def _atomic_write(path, data, mode="wb"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8", "newline": ""})) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model, path):
    _atomic_write(path, encode_checkpoint(model.state_dict()))


def load_checkpoint(path):
    """Tensors stored in ``path`` as a name -> array dict."""
    return decode_checkpoint(Path(path).read_bytes(), str(path))


# -- metrics CSV --------------------------------------------------------------

def metrics_header(K):
    return (["epoch", "lr"] + [f"A_{k}" for k in range(1, K + 1)] + ["train_loss"]
            + [f"train_acc_{k}" for k in range(1, K + 1)] + [f"test_acc_{k}" for k in range(1, K + 1)])


def _fmt(v):
    return repr(float(v))


def metrics_row(rec):
    return ([str(rec.epoch), _fmt(rec.lr)] + [_fmt(a) for a in rec.weights] + [_fmt(rec.train_loss)]
            + [_fmt(a) for a in rec.train_acc] + [_fmt(a) for a in rec.test_acc])


def _render(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def write_metrics_csv(history, path):
    if not history:
        raise ValueError("empty history")
    K = len(history[0].weights)
    _atomic_write(path, _render([metrics_header(K)] + [metrics_row(r) for r in history]), "w")


def append_metrics_row(rec, path):
    """Append one epoch; writes the header first when the file is new."""
    path = Path(path)
    rows = [] if path.exists() else [metrics_header(len(rec.weights))]
    with open(path, "a", encoding="utf-8", newline="") as f:
        f.write(_render(rows + [metrics_row(rec)]))


def read_metrics_csv(path):
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    header = rows[0]
    K = sum(1 for h in header if h.startswith("A_"))
    out = []
    for row in rows[1:]:
        vals = row[2:]
        out.append(MetricsRecord(
            epoch=int(row[0]), lr=float(row[1]),
            weights=tuple(float(v) for v in vals[:K]),
            train_loss=float(vals[K]),
            train_acc=tuple(float(v) for v in vals[K + 1:2 * K + 1]),
            test_acc=tuple(float(v) for v in vals[2 * K + 1:3 * K + 1])))
    return out
