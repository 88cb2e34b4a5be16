#!/usr/bin/env python3
"""Convert an image folder tree into the CSNT dataset layout read by `csn`.

Every directory that directly contains images becomes one class, named by its
path relative to the root with `/` replaced by `_` (so Omniglot's
`alphabet/characterNN` folders become `alphabet_characterNN`). Each image is
written as a rank-2 float32 CSNT tensor with values in [0, 1], and
`manifest.csv` lists `class_id,relative_path` rows.

    python tools/omniglot_to_csnt.py images_background out/ --size 28
"""

import argparse
import csv
import struct
from pathlib import Path

import numpy as np
from PIL import Image

EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif"}


def write_csnt(path: Path, pixels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(b"CSNT")
        f.write(struct.pack("<BB", 1, pixels.ndim))
        f.write(struct.pack(f"<{pixels.ndim}I", *pixels.shape))
        f.write(pixels.astype("<f4").tobytes())


def load(path: Path, size: int, invert: bool) -> np.ndarray:
    img = Image.open(path).convert("L")
    if size:
        img = img.resize((size, size), Image.BILINEAR)
    pixels = np.asarray(img, dtype=np.float64) / 255.0
    # Omniglot draws dark strokes on white; ink should be the bright value
    return 1.0 - pixels if invert else pixels


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root", type=Path, help="image folder tree")
    ap.add_argument("out", type=Path, help="output dataset directory")
    ap.add_argument("--size", type=int, default=28, help="resize to SIZE x SIZE (0 keeps the original)")
    ap.add_argument("--no-invert", action="store_true", help="keep pixel polarity as stored")
    args = ap.parse_args()

    rows = []
    class_dirs = sorted({p.parent for p in args.root.rglob("*") if p.suffix.lower() in EXTENSIONS})
    if not class_dirs:
        raise SystemExit(f"no images under {args.root}")
    for class_dir in class_dirs:
        class_id = "_".join(class_dir.relative_to(args.root).parts) or "root"
        target = args.out / class_id
        target.mkdir(parents=True, exist_ok=True)
        images = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in EXTENSIONS)
        for i, image in enumerate(images):
            rel = Path(class_id) / f"{i:03d}.csnt"
            write_csnt(args.out / rel, load(image, args.size, not args.no_invert))
            rows.append((class_id, rel.as_posix()))

    with open(args.out / "manifest.csv", "w", newline="") as f:
        csv.writer(f).writerows(rows)
    print(f"{len(class_dirs)} classes, {len(rows)} images -> {args.out}")


if __name__ == "__main__":
    main()
