#!/usr/bin/env python3
"""Build a gzip IDX MNIST subset from the digits bundled in the `mnist` npm package.

The npm package (cazala/mnist 1.1.0) ships 10,000 real MNIST digits as
normalized floats rounded to three decimals. Multiplying by 255 and rounding
recovers the original bytes. The last `--test-per-class` digits of every class
are held out as the test split.

    python3 tools/make_mnist_subset.py --out data/mnist-subset
"""
import argparse
import gzip
import json
import pathlib
import struct
import subprocess
import tarfile
import tempfile


def fetch_package(workdir: pathlib.Path) -> pathlib.Path:
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL)
    return workdir / "mnist-1.1.0.tgz"


def load_digits(tgz: pathlib.Path):
    per_class = []
    with tarfile.open(tgz) as tar:
        for digit in range(10):
            raw = tar.extractfile(f"package/src/digits/{digit}.json").read()
            values = json.loads(raw)["data"]
            images = [bytes(max(0, min(255, round(v * 255))) for v in values[i:i + 784])
                      for i in range(0, len(values), 784)]
            per_class.append(images)
    return per_class


def write_idx(path: pathlib.Path, images, labels):
    with gzip.GzipFile(path.with_name(path.name + "-images-idx3-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(path.with_name(path.name + "-labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist-subset")
    ap.add_argument("--package", help="path to mnist-1.1.0.tgz (fetched with npm when omitted)")
    ap.add_argument("--test-per-class", type=int, default=100)
    args = ap.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        tgz = pathlib.Path(args.package) if args.package else fetch_package(pathlib.Path(tmp))
        per_class = load_digits(tgz)

    train, test = ([], []), ([], [])
    for digit, images in enumerate(per_class):
        cut = len(images) - args.test_per_class
        for i, img in enumerate(images):
            split = train if i < cut else test
            split[0].append(img)
            split[1].append(digit)
    write_idx(out / "train", *train)
    write_idx(out / "t10k", *test)
    print(f"train={len(train[0])} test={len(test[0])} -> {out}")


if __name__ == "__main__":
    main()
