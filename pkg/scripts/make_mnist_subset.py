"""Build the bundled 5k-image MNIST subset as gzipped IDX files.

The full MNIST archive is not reachable from the build sandbox, but the
``mlxtend`` wheel on PyPI ships 5000 genuine MNIST digits (500 per class) as
a CSV. This script downloads that wheel, splits each class 400/100 into
train/test with a fixed seed, and writes the four standard IDX files.

    python scripts/make_mnist_subset.py data/mnist5k
"""

import glob
import gzip
import io
import struct
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
TEST_PER_CLASS = 100


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + array.astype(np.uint8).tobytes())


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, "mlxtend==0.24.0"],
            check=True,
        )
        wheel = zipfile.ZipFile(glob.glob(f"{tmp}/*.whl")[0])
        raw = gzip.decompress(wheel.read(CSV_MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",").astype(np.int64)
    images, labels = table[:, :-1], table[:, -1]

    rng = np.random.Generator(np.random.PCG64(0))
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test_idx.extend(idx[:TEST_PER_CLASS])
        train_idx.extend(idx[TEST_PER_CLASS:])
    train_idx = rng.permutation(np.array(train_idx))
    test_idx = rng.permutation(np.array(test_idx))

    for prefix, idx in (("train", train_idx), ("t10k", test_idx)):
        write_idx(out / f"{prefix}-images-idx3-ubyte.gz", images[idx].reshape(-1, 28, 28), 0x00000803)
        write_idx(out / f"{prefix}-labels-idx1-ubyte.gz", labels[idx], 0x00000801)
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test images to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/mnist5k")
