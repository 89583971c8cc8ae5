"""Binary exchange formats.

Checkpoints ("FMNU"): magic, u32 LE version, u64 LE array count, then per
array: u64 LE name length, UTF-8 name "<group>/<layer>/<tensor>", u64 LE
rank, u64 LE dims, raw little-endian float64 payload.

Datasets ("FMDS"): magic, u32 LE version, u64 LE sample count / organ count /
height / width, per sample the image (float64 LE) and full + visible label
maps (u16 LE), then a footer with the labeled organ ids and the
train/val/test split indices (u64 LE counts and values).

Both round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"FMNU"
DATA_MAGIC = b"FMDS"
FORMAT_VERSION = 1


class FormatError(IOError):
    """A file does not conform to its declared binary format."""


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("unexpected end of file")
    return buf


def _read_u64(f) -> int:
    return struct.unpack("<Q", _read_exact(f, 8))[0]


# ---------------------------------------------------------------------------
# checkpoints

def write_checkpoint(path, arrays: dict) -> None:
    """Write named float64 arrays; iteration order is preserved."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<Q", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<Q", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        version = struct.unpack("<I", _read_exact(f, 4))[0]
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        count = _read_u64(f)
        for _ in range(count):
            name = _read_exact(f, _read_u64(f)).decode("utf-8")
            rank = _read_u64(f)
            shape = tuple(_read_u64(f) for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            payload = _read_exact(f, 8 * n)
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# datasets

def write_dataset(path, dataset) -> None:
    """Serialize a synthdata.ClientDataset."""
    path = Path(path)
    n = len(dataset.images)
    h, w = dataset.images[0].shape[1:] if n else (0, 0)
    with open(path, "wb") as f:
        f.write(DATA_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<QQQQ", n, dataset.num_organs, h, w))
        for img, full, visible in zip(dataset.images, dataset.full_labels,
                                      dataset.visible_labels):
            f.write(np.ascontiguousarray(img, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(full, dtype="<u2").tobytes())
            f.write(np.ascontiguousarray(visible, dtype="<u2").tobytes())
        labeled = sorted(dataset.labeled_set)
        f.write(struct.pack("<Q", len(labeled)))
        for m in labeled:
            f.write(struct.pack("<Q", m))
        for split in ("train", "val", "test"):
            idx = dataset.splits[split]
            f.write(struct.pack("<Q", len(idx)))
            for i in idx:
                f.write(struct.pack("<Q", i))


def read_dataset(path):
    from .synthdata import ClientDataset

    path = Path(path)
    with open(path, "rb") as f:
        if _read_exact(f, 4) != DATA_MAGIC:
            raise FormatError(f"{path}: not a dataset file")
        version = struct.unpack("<I", _read_exact(f, 4))[0]
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported dataset version {version}")
        n, num_organs, h, w = struct.unpack("<QQQQ", _read_exact(f, 32))
        images, full_labels, visible_labels = [], [], []
        for _ in range(n):
            img = np.frombuffer(_read_exact(f, 8 * h * w), dtype="<f8")
            images.append(img.reshape(1, h, w).astype(np.float64))
            full = np.frombuffer(_read_exact(f, 2 * h * w), dtype="<u2")
            full_labels.append(full.reshape(h, w).astype(np.uint16))
            vis = np.frombuffer(_read_exact(f, 2 * h * w), dtype="<u2")
            visible_labels.append(vis.reshape(h, w).astype(np.uint16))
        labeled = frozenset(_read_u64(f) for _ in range(_read_u64(f)))
        splits = {}
        for split in ("train", "val", "test"):
            splits[split] = [_read_u64(f) for _ in range(_read_u64(f))]
    return ClientDataset(images=images, full_labels=full_labels,
                         visible_labels=visible_labels, labeled_set=labeled,
                         num_organs=int(num_organs), splits=splits)
