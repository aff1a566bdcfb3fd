"""MNIST (IDX) and CIFAR-10 (binary batch) ingestion and augmentation."""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from functools import lru_cache
from pathlib import Path

import numpy as np

DATA_ENV = "SHIFTFORGE_DATA"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
# md5 of the canonical gzipped distribution files
MNIST_MD5 = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}
CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = ["test_batch.bin"]
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetError(RuntimeError):
    """Missing, truncated or corrupt dataset files."""


def data_root(root: str | os.PathLike | None = None) -> Path:
    if root:
        return Path(root)
    return Path(os.environ.get(DATA_ENV, "data"))


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_maybe_gz(directory: Path, stem: str, verify: bool) -> bytes:
    for cand in (directory / stem, directory / "mnist" / stem):
        if cand.exists():
            return cand.read_bytes()
        gz = cand.with_name(cand.name + ".gz")
        if gz.exists():
            want = MNIST_MD5.get(gz.name)
            if verify and want and _md5(gz) != want:
                raise DatasetError(f"checksum mismatch for {gz}")
            try:
                return gzip.decompress(gz.read_bytes())
            except (OSError, EOFError) as exc:
                raise DatasetError(f"cannot decompress {gz}: {exc}") from exc
    raise DatasetError(f"MNIST file {stem}[.gz] not found under {directory}")


def parse_idx(raw: bytes, expect_magic: int) -> np.ndarray:
    if len(raw) < 8:
        raise DatasetError("IDX file shorter than its header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expect_magic:
        raise DatasetError(f"bad IDX magic {magic:#x}, expected {expect_magic:#x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) - header != n:
        raise DatasetError(f"IDX payload has {len(raw) - header} bytes, header declares {n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_mnist_raw(split: str, root=None, verify: bool = True) -> tuple[np.ndarray, np.ndarray]:
    if split not in MNIST_FILES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    d = data_root(root)
    img_stem, lab_stem = MNIST_FILES[split]
    images = parse_idx(_read_maybe_gz(d, img_stem, verify), 0x00000803)
    labels = parse_idx(_read_maybe_gz(d, lab_stem, verify), 0x00000801)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise DatasetError("MNIST label outside 0..9")
    return images[:, None, :, :], labels.astype(np.int64)


def _cifar_dir(root) -> Path:
    d = data_root(root)
    for cand in (d / "cifar-10-batches-bin", d):
        if (cand / CIFAR_TEST[0]).exists() or (cand / CIFAR_TRAIN[0]).exists():
            return cand
    raise DatasetError(f"CIFAR-10 binary batches not found under {d}")


def read_cifar_raw(split: str, root=None) -> tuple[np.ndarray, np.ndarray]:
    names = {"train": CIFAR_TRAIN, "test": CIFAR_TEST}.get(split)
    if names is None:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    d = _cifar_dir(root)
    imgs, labs = [], []
    for name in names:
        path = d / name
        if not path.exists():
            raise DatasetError(f"missing CIFAR-10 batch {path}")
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD:
            raise DatasetError(f"{path} size {raw.size} is not a whole number of {CIFAR_RECORD}-byte records")
        rec = raw.reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max() > 9:
            raise DatasetError(f"{path}: label outside 0..9")
        labs.append(rec[:, 0].astype(np.int64))
        imgs.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return np.concatenate(imgs), np.concatenate(labs)


@lru_cache(maxsize=8)
def _raw(name: str, split: str, root: str, verify: bool):
    if name == "mnist":
        return read_mnist_raw(split, root, verify)
    return read_cifar_raw(split, root)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def balanced_subset(labels: np.ndarray, n: int) -> np.ndarray:
    """First ``n // classes`` indices of each class, in file order."""
    classes = np.unique(labels)
    per = n // len(classes)
    idx = np.concatenate([np.flatnonzero(labels == c)[:per] for c in classes])
    return np.sort(idx)


def parse_dataset_name(name: str) -> tuple[str, int | None]:
    """``mnist``, ``cifar10`` or ``cifar10_subset`` / ``cifar10_subset:N``."""
    base, _, n = name.partition(":")
    if base == "cifar10_subset":
        return "cifar10", int(n) if n else 5000
    if base in ("mnist", "cifar10") and not n:
        return base, None
    raise ValueError(f"unknown dataset {name!r}")


def load_dataset(name: str, split: str, root=None, subset: int | None = None, verify: bool = True):
    """Normalized float32 images [N,C,H,W] and int64 labels.

    Normalization uses per-channel mean/std of the (full) training split.
    ``cifar10_subset`` restricts only the training split to a class-balanced subset.
    """
    base, n = parse_dataset_name(name)
    n = subset if subset is not None else n
    key_root = str(data_root(root))
    try:
        images, labels = _raw(base, split, key_root, verify)
        mean, std = channel_stats(_raw(base, "train", key_root, verify)[0])
    except FileNotFoundError as exc:
        raise DatasetError(str(exc)) from exc
    if n is not None and split == "train":
        keep = balanced_subset(labels, n)
        images, labels = images[keep], labels[keep]
    x = (images.astype(np.float32) / 255.0 - mean.astype(np.float32)[None, :, None, None]) / std.astype(np.float32)[
        None, :, None, None
    ]
    return x.astype(np.float32), labels


def augment_crop_flip(batch: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop after zero padding, then random horizontal flip, per image."""
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(batch)
    for i in range(n):
        img = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = img[:, :, ::-1] if flip[i] else img
    return out
