"""Build MNIST IDX files from the copy bundled in the ``mnist-hub`` wheel.

The wheel ships the classic ``mnist.pkl.gz`` (50k train / 10k valid / 10k test,
float32 pixels equal to byte/256).  Pixels are mapped back to bytes losslessly
and written as the four standard gzipped IDX files, train = train + valid in
the original order.

    python scripts/fetch_mnist.py data/mnist
"""

import gzip
import pickle
import struct
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">BBBB", 0, 0, 0x08, array.ndim)
    header += struct.pack(">" + "I" * array.ndim, *array.shape)
    with gzip.open(path, "wb") as f:
        f.write(header + array.tobytes())


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             "mnist-hub==0.1.4", "-d", tmp],
            check=True,
        )
        wheel = next(Path(tmp).glob("mnist_hub-*.whl"))
        raw = zipfile.ZipFile(wheel).read("mnist/data/mnist.pkl.gz")
    (tx, ty), (vx, vy), (sx, sy) = pickle.loads(gzip.decompress(raw), encoding="latin1")

    def to_bytes(x):
        b = np.rint(x.astype(np.float64) * 256.0)
        assert b.min() >= 0 and b.max() <= 255
        return b.astype(np.uint8).reshape(-1, 28, 28)

    write_idx(out / "train-images-idx3-ubyte.gz", to_bytes(np.concatenate([tx, vx])))
    write_idx(out / "train-labels-idx1-ubyte.gz", np.concatenate([ty, vy]))
    write_idx(out / "t10k-images-idx3-ubyte.gz", to_bytes(sx))
    write_idx(out / "t10k-labels-idx1-ubyte.gz", sy)
    print(f"wrote MNIST IDX files to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/mnist")
