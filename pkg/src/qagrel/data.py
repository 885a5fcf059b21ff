"""Dataset loading, normalization, and validation splitting.

Supported container formats:

* IDX (big-endian magic + dimension header, raw ubyte payload), plain or
  gzipped, for the handwritten-digit sets;
* CIFAR binary records (one or two label bytes followed by 3072 pixel
  bytes in channel-major R, G, B planes).

Pixels are scaled by 1/255 into [0, 1]; no other preprocessing is applied.
Loaders are strict: a malformed file raises a specific DataFormatError
subclass and never yields a partial dataset. A small bundled digit set
(a 10,000-sample subset of the usual 28x28 corpus) ships with the package
for tests and demos, so those run without any download.
"""

from __future__ import annotations

import gzip
import hashlib
import logging
import shutil
import struct
import tempfile
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumMismatchError,
    ConfigError,
    CountMismatchError,
    FramingError,
    LabelRangeError,
    TruncatedFileError,
)
from .tensor import make_rng

__all__ = [
    "Dataset",
    "SplitDataset",
    "load_mnist_idx",
    "load_cifar_binary",
    "split_validation",
    "load_desk_mnist",
    "sha256_file",
    "fetch_file",
]

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_RECORD_BYTES = {"c10": 3073, "c100": 3074}
CIFAR_CLASSES = {"c10": 10, "c100": 100}


@dataclass(frozen=True)
class Dataset:
    """Immutable image-classification dataset in channel-last layout."""

    images: np.ndarray  # (n, h, w, c) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(
            self.images[indices].copy(),
            self.labels[indices].copy(),
            self.num_classes,
            self.name if name is None else name,
        )


@dataclass(frozen=True)
class SplitDataset:
    """Disjoint train / validation partitions, plus an optional test set."""

    train: Dataset
    validation: Dataset
    test: Dataset | None
    split_seed: int


def _file_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _read_idx(path, magic: int, header_dims: int, what: str):
    buf = _file_bytes(path)
    header = 4 * (1 + header_dims)
    if len(buf) < header:
        raise TruncatedFileError(
            f"{path}: {what} header needs {header} bytes, file has {len(buf)}"
        )
    fields = struct.unpack_from(f">{1 + header_dims}I", buf)
    if fields[0] != magic:
        raise BadMagicError(
            f"{path}: magic {fields[0]:#010x}, expected {magic:#010x} for {what}"
        )
    dims = fields[1:]
    need = header + int(np.prod(dims))
    if len(buf) < need:
        raise TruncatedFileError(
            f"{path}: {what} payload needs {need} bytes, file ends at {len(buf)}"
        )
    if len(buf) > need:
        raise FramingError(f"{path}: {len(buf) - need} trailing bytes after {what} payload")
    return np.frombuffer(buf, dtype=np.uint8, count=int(np.prod(dims)), offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, num_classes: int = 10, name: str = "mnist") -> Dataset:
    """Load a matched IDX image/label file pair (plain or gzipped)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images_path} holds {images.shape[0]} images but "
            f"{labels_path} holds {labels.shape[0]} labels"
        )
    if labels.size and labels.max() >= num_classes:
        raise LabelRangeError(
            f"{labels_path}: label {labels.max()} outside [0, {num_classes})"
        )
    ds = Dataset(
        (images.astype(np.float64) / 255.0)[..., None],
        labels.astype(np.int64),
        num_classes,
        name,
    )
    logger.info("%s: %d samples, label histogram %s", name, len(ds), np.bincount(ds.labels, minlength=num_classes).tolist())
    return ds


def load_cifar_binary(paths, variant: str = "c10", name: str | None = None) -> Dataset:
    """Load CIFAR binary batch files and concatenate their records.

    Variant c10 records are 1 label byte + 3072 pixels; c100 records carry
    a coarse and a fine label byte, and the fine label is used.
    """
    if variant not in CIFAR_RECORD_BYTES:
        raise ConfigError(f"unknown CIFAR variant {variant!r}, expected 'c10' or 'c100'")
    if isinstance(paths, (str, Path)):
        paths = [paths]
    rec = CIFAR_RECORD_BYTES[variant]
    num_classes = CIFAR_CLASSES[variant]
    label_offset = 0 if variant == "c10" else 1
    all_images = []
    all_labels = []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % rec != 0:
            raise FramingError(
                f"{path}: {len(raw)} bytes is not a whole number of {rec}-byte records "
                f"(stray data begins at byte {len(raw) - len(raw) % rec})"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
        labels = records[:, label_offset]
        if labels.size and labels.max() >= num_classes:
            raise LabelRangeError(f"{path}: label {labels.max()} outside [0, {num_classes})")
        pixels = records[:, rec - 3072 :]
        # Channel-major planes (R, G, B) to channel-last (h, w, c).
        images = pixels.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        all_images.append(images)
        all_labels.append(labels)
    images = np.concatenate(all_images).astype(np.float64) / 255.0
    labels = np.concatenate(all_labels).astype(np.int64)
    ds = Dataset(images, labels, num_classes, name or f"cifar-{variant}")
    logger.info("%s: %d samples from %d file(s)", ds.name, len(ds), len(paths))
    return ds


def split_validation(ds: Dataset, n_val: int, seed: int, test: Dataset | None = None) -> SplitDataset:
    """Split off a validation partition by a seeded shuffle.

    The first n_val indices of the permutation become the validation set;
    the rest stay for training.
    """
    n = len(ds)
    if n_val >= n:
        raise ConfigError(f"cannot hold out {n_val} validation samples from {n}")
    perm = make_rng(seed).permutation(n)
    return SplitDataset(
        train=ds.subset(perm[n_val:], f"{ds.name}-train"),
        validation=ds.subset(perm[:n_val], f"{ds.name}-val"),
        test=test,
        split_seed=seed,
    )


_DESK_FILES = {
    "train": ("desk-mnist-train-images-idx3-ubyte.gz", "desk-mnist-train-labels-idx1-ubyte.gz"),
    "test": ("desk-mnist-test-images-idx3-ubyte.gz", "desk-mnist-test-labels-idx1-ubyte.gz"),
}


def load_desk_mnist() -> tuple[Dataset, Dataset]:
    """The bundled 10,000-digit subset: (train, test) = (9001, 999) samples."""
    assets = resources.files("qagrel") / "assets"
    out = []
    for split, (img_name, lbl_name) in _DESK_FILES.items():
        with resources.as_file(assets / img_name) as ip, resources.as_file(assets / lbl_name) as lp:
            out.append(load_mnist_idx(ip, lp, name=f"desk-mnist-{split}"))
    return out[0], out[1]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch_file(url: str, dest, sha256: str) -> Path:
    """Download url to dest and verify its SHA-256 digest.

    Never called implicitly by loaders; an existing file with the right
    digest is kept. A digest mismatch removes the partial download.
    """
    dest = Path(dest)
    if dest.exists() and sha256_file(dest) == sha256.lower():
        logger.info("%s already present with matching digest", dest)
        return dest
    dest.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=dest.parent, delete=False) as tmp:
        tmp_path = Path(tmp.name)
        try:
            with urllib.request.urlopen(url) as response:
                shutil.copyfileobj(response, tmp)
        except Exception:
            tmp_path.unlink(missing_ok=True)
            raise
    got = sha256_file(tmp_path)
    if got != sha256.lower():
        tmp_path.unlink()
        raise ChecksumMismatchError(f"{url}: digest {got} does not match expected {sha256}")
    tmp_path.replace(dest)
    logger.info("fetched %s -> %s", url, dest)
    return dest
