"""Build data/mnist5k-images-idx3-ubyte.gz from the 5,000-image MNIST sample
bundled with mlxtend (``mlxtend/data/data/mnist_5k.csv.gz``).

Usage:
    python scripts/prepare_mnist.py [path/to/mlxtend.whl | path/to/mnist_5k.csv.gz]

The rows are shuffled with a fixed seed (the source is sorted by label) so that
taking the last 1,000 images as validation gives a class-balanced split.
"""
import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from amortize.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
OUT = Path(__file__).resolve().parent.parent / "data" / "mnist5k-images-idx3-ubyte.gz"


def read_source(arg: str | None) -> bytes:
    if arg is None:
        import mlxtend
        return (Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz").read_bytes()
    if arg.endswith(".whl"):
        return zipfile.ZipFile(arg).read(MEMBER)
    return Path(arg).read_bytes()


def main() -> None:
    raw = gzip.decompress(read_source(sys.argv[1] if len(sys.argv) > 1 else None))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels = table[:, :784].astype(np.uint8).reshape(-1, 28, 28)
    order = np.random.default_rng(20180710).permutation(pixels.shape[0])
    OUT.parent.mkdir(exist_ok=True)
    write_idx(OUT, pixels[order])
    print(f"wrote {pixels.shape[0]} images to {OUT}")


if __name__ == "__main__":
    main()
