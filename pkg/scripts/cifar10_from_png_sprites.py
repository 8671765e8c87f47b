"""Rebuild the CIFAR-10 binary batches from the PNG sprite sheets.

The npm package ``tfjs-cifar10`` ships every batch as a lossless 1024x10000
RGB PNG (one image per row, pixels interleaved) plus JSON label lists. This
script rewrites them in the original 3073-byte-per-record binary layout so
the regular loader can read them.

    npm pack tfjs-cifar10 && tar xzf tfjs-cifar10-*.tgz
    python scripts/cifar10_from_png_sprites.py package/ data/cifar-10-batches-bin
"""

import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image


def convert(sprite: Path, labels: list, out: Path) -> None:
    rows = np.asarray(Image.open(sprite).convert("RGB"), dtype=np.uint8)
    n = rows.shape[0]
    if len(labels) != n:
        raise ValueError(f"{sprite}: {n} images but {len(labels)} labels")
    # (n, 1024, 3) interleaved -> (n, 3, 1024) channel-planar
    planar = rows.reshape(n, 1024, 3).transpose(0, 2, 1).reshape(n, 3072)
    records = np.empty((n, 3073), dtype=np.uint8)
    records[:, 0] = np.asarray(labels, dtype=np.uint8)
    records[:, 1:] = planar
    out.write_bytes(records.tobytes())


def main(src: str, dst: str) -> None:
    src_dir, dst_dir = Path(src), Path(dst)
    dst_dir.mkdir(parents=True, exist_ok=True)
    train_labels = json.loads((src_dir / "train_lables.json").read_text())
    test_labels = json.loads((src_dir / "test_lables.json").read_text())
    for b in range(1, 6):
        chunk = train_labels[(b - 1) * 10000: b * 10000]
        convert(src_dir / f"data_batch_{b}.png", chunk, dst_dir / f"data_batch_{b}.bin")
    convert(src_dir / "test_batch.png", test_labels, dst_dir / "test_batch.bin")
    (dst_dir / "batches.meta.txt").write_text(
        "airplane\nautomobile\nbird\ncat\ndeer\ndog\nfrog\nhorse\nship\ntruck\n"
    )


if __name__ == "__main__":
    main(*sys.argv[1:3])
