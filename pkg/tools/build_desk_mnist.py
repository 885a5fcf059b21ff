"""One-off builder for the vendored desk-scale digit subset.

Reads the canonical IDX files (plain or gzipped) from a data directory and
writes four gzipped IDX files holding a balanced subset:

    desk-mnist-train-images-idx3-ubyte.gz   9,000 images (900 per class)
    desk-mnist-train-labels-idx1-ubyte.gz
    desk-mnist-test-images-idx3-ubyte.gz    1,000 images (100 per class)
    desk-mnist-test-labels-idx1-ubyte.gz

Test images come from the official held-out test files, never the training
files. Per-class picks and the final sample order are shuffled with a fixed
seed so the outputs are bit-reproducible from the same inputs.

Usage: python tools/build_desk_mnist.py <data_dir> <out_dir>
"""

import gzip
import struct
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from qagrel.data import Dataset, load_mnist_idx  # noqa: E402

SEED = 20240521
TRAIN_PER_CLASS = 900
TEST_PER_CLASS = 100


def find(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise SystemExit(f"missing {name}[.gz] under {data_dir}")


def balanced_subset(ds: Dataset, per_class: int, rng: np.random.Generator):
    picks = []
    for digit in range(10):
        pool = np.flatnonzero(ds.labels == digit)
        if len(pool) < per_class:
            raise SystemExit(f"class {digit}: only {len(pool)} samples, need {per_class}")
        picks.append(rng.permutation(pool)[:per_class])
    order = rng.permutation(np.concatenate(picks))
    images = np.rint(ds.images[order] * 255.0).astype(np.uint8)
    return images[..., 0], ds.labels[order].astype(np.uint8)


def write_idx_images(path: Path, images: np.ndarray) -> None:
    n, rows, cols = images.shape
    header = struct.pack(">4I", 0x803, n, rows, cols)
    with gzip.open(path, "wb", compresslevel=9) as f:
        f.write(header + images.tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    header = struct.pack(">2I", 0x801, len(labels))
    with gzip.open(path, "wb", compresslevel=9) as f:
        f.write(header + labels.tobytes())


def main() -> None:
    if len(sys.argv) != 3:
        raise SystemExit(__doc__)
    data_dir, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(SEED)

    train = load_mnist_idx(
        find(data_dir, "train-images-idx3-ubyte"),
        find(data_dir, "train-labels-idx1-ubyte"),
        name="canonical-train",
    )
    test = load_mnist_idx(
        find(data_dir, "t10k-images-idx3-ubyte"),
        find(data_dir, "t10k-labels-idx1-ubyte"),
        name="canonical-test",
    )

    for split, ds, per_class in [
        ("train", train, TRAIN_PER_CLASS),
        ("test", test, TEST_PER_CLASS),
    ]:
        images, labels = balanced_subset(ds, per_class, rng)
        write_idx_images(out_dir / f"desk-mnist-{split}-images-idx3-ubyte.gz", images)
        write_idx_labels(out_dir / f"desk-mnist-{split}-labels-idx1-ubyte.gz", labels)
        print(f"{split}: {len(labels)} samples, histogram "
              f"{np.bincount(labels, minlength=10).tolist()}")


if __name__ == "__main__":
    main()
