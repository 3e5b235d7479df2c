"""Reads the matcher toolkit's corpus directory layout and prepares
desk-scale (32x24) training tensors."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
import torch

from .models import IMG_H, IMG_W


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if data[:2] != b"P5":
        raise ValueError(f"{path}: expected a binary PGM file")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        m = re.match(rb"(?:\s+|#[^\n]*\n)*(\d+)", data[pos:])
        if m is None:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(int(m.group(1)))
        pos += m.end()
    width, height, maxval = tokens
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    pos += 1
    raster = np.frombuffer(data[pos : pos + width * height], dtype=np.uint8)
    return raster.reshape(height, width).astype(np.float32) / 255.0


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    t = torch.from_numpy(img)[None, None]
    out = torch.nn.functional.interpolate(
        t, size=(out_h, out_w), mode="bilinear", align_corners=False
    )
    return out[0, 0].numpy()


def load_corpus_images(root: str | Path) -> torch.Tensor:
    """Every enroll and probe image of the corpus, resized to 32x24.

    Returns a float32 tensor of shape (N, 1, 24, 32) with values in [0, 1].
    """
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    images = []
    for ident in manifest["identities"]:
        for split in ("enroll", "probe"):
            for p in sorted((root / ident / split).glob("*.pgm"), key=lambda q: int(q.stem)):
                img = _read_pgm(p)
                images.append(_resize_bilinear(img, IMG_H, IMG_W))
    if not images:
        raise ValueError(f"no images found under {root}")
    return torch.from_numpy(np.stack(images))[:, None]
