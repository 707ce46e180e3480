"""Materialize MNIST as IDX files without direct internet access.

The only reachable source in restricted environments is the Python package
index. The ``mnist-hub`` wheel bundles the classic ``mnist.pkl.gz`` (50k train,
10k validation, 10k test; pixels stored as ``k / 256``). Train and validation
concatenate back to the canonical 60k training set in its original order, and
multiplying by 256 recovers the original bytes exactly.

    python scripts/fetch_mnist.py [--out data/mnist] [--wheel path/to/wheel]
"""
import argparse
import glob
import gzip
import io
import os
import pickle
import subprocess
import sys
import tempfile
import zipfile

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
from jointcert.data_io import encode_idx  # noqa: E402

PACKAGE = "mnist-hub==0.1.4"
MEMBER = "mnist/data/mnist.pkl.gz"


def download_wheel(dest: str) -> str:
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q", PACKAGE, "-d", dest],
                   check=True)
    return glob.glob(os.path.join(dest, "*.whl"))[0]


def to_bytes(x: np.ndarray) -> np.ndarray:
    q = x.astype(np.float64) * 256.0
    if np.abs(q - np.round(q)).max() != 0:
        raise SystemExit("pixel values are not multiples of 1/256; refusing lossy conversion")
    return np.round(q).astype(np.uint8).reshape(-1, 28, 28)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist"))
    ap.add_argument("--wheel")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or download_wheel(tmp)
        blob = zipfile.ZipFile(wheel).read(MEMBER)
    (xtr, ytr), (xva, yva), (xte, yte) = pickle.load(gzip.open(io.BytesIO(blob)), encoding="latin1")
    train_x = to_bytes(np.concatenate([xtr, xva]))
    train_y = np.concatenate([ytr, yva]).astype(np.uint8)
    os.makedirs(args.out, exist_ok=True)
    files = {
        "train-images-idx3-ubyte.gz": train_x,
        "train-labels-idx1-ubyte.gz": train_y,
        "t10k-images-idx3-ubyte.gz": to_bytes(xte),
        "t10k-labels-idx1-ubyte.gz": yte.astype(np.uint8),
    }
    for name, arr in files.items():
        with gzip.GzipFile(os.path.join(args.out, name), "wb", mtime=0) as f:
            f.write(encode_idx(arr))
    print(f"wrote {len(files)} files to {os.path.abspath(args.out)}")


if __name__ == "__main__":
    main()
