"""Build a stratified MNIST subset in IDX format from the 5,000-digit CSV shipped in the mlxtend wheel.

    python3 scripts/make_mnist_subset.py /path/to/mlxtend-0.24.0-py3-none-any.whl data/mnist5k

Writes train/t10k image and label files (gzipped IDX, 400 + 100 digits per class).
"""

import argparse
import gzip
import io
import struct
import zipfile
from pathlib import Path

import numpy as np

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_idx(path, arr, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in arr.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("wheel")
    ap.add_argument("out")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with zipfile.ZipFile(args.wheel) as zf:
        raw = gzip.decompress(zf.read(CSV_MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images, labels = table[:, :-1].astype(np.uint8), table[:, -1].astype(np.uint8)

    rng = np.random.Generator(np.random.Philox(args.seed))
    train_idx, test_idx = [], []
    for digit in range(10):
        idx = rng.permutation(np.flatnonzero(labels == digit))
        test_idx.append(idx[: args.test_per_class])
        train_idx.append(idx[args.test_per_class :])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, parts in (("train", train_idx), ("t10k", test_idx)):
        idx = rng.permutation(np.concatenate(parts))
        write_idx(out / f"{name}-images-idx3-ubyte.gz", images[idx].reshape(-1, 28, 28), 0x803)
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", labels[idx], 0x801)
        print(f"{name}: {len(idx)} samples")


if __name__ == "__main__":
    main()
