"""Decoder export in the VFW1 weight format, plus forward-parity fixtures.

VFW1 layout (little-endian): magic "VFW1"; u8 network type (2 = decoder);
u32 layer count; per layer: u8 layer type, u8 rank, rank x u32 dims, raw
float32 weights then biases.  Layer types: 1 conv (bias length = out
channels), 2 dense (bias length = rows).  Decoder layers in order: dense,
conv1, conv2, conv3.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .models import Decoder

_MAGIC = b"VFW1"
_NET_DECODER = 2
_LAYER_CONV = 1
_LAYER_DENSE = 2


def _record(layer_type: int, weight: np.ndarray, bias: np.ndarray) -> bytes:
    dims = weight.shape
    head = struct.pack("<BB", layer_type, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    return head + weight.astype("<f4").tobytes() + bias.astype("<f4").tobytes()


def export_weights(decoder: Decoder, path: str | Path) -> None:
    """Write the decoder losslessly; refuses non-finite weights."""
    tensors = []
    tensors.append((_LAYER_DENSE, decoder.dense.weight, decoder.dense.bias))
    for conv in (decoder.conv1, decoder.conv2, decoder.conv3):
        tensors.append((_LAYER_CONV, conv.weight, conv.bias))
    records = []
    for layer_type, w, b in tensors:
        w = w.detach().numpy()
        b = b.detach().numpy()
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("refusing to export non-finite weights")
        records.append(_record(layer_type, w, b))
    payload = _MAGIC + struct.pack("<BI", _NET_DECODER, len(records)) + b"".join(records)
    Path(path).write_bytes(payload)


def export_parity_fixtures(decoder: Decoder, path: str | Path, n: int = 5, seed: int = 123) -> None:
    """Fixed latents and the decoder's own forward outputs, for cross-checking
    any other loader of the weight file (tolerance 1e-5 per pixel)."""
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(n, decoder.latent_dim, generator=gen)
    with torch.no_grad():
        out = decoder(z)
    payload = {
        "latent_dim": decoder.latent_dim,
        "latents": z.numpy().tolist(),
        "outputs": out[:, 0].numpy().tolist(),
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def write_training_curves(path: str | Path, bvae_history: dict, wgan_history: dict | None) -> None:
    lines = ["stage,epoch,metric,value"]
    for metric, values in bvae_history.items():
        for e, v in enumerate(values):
            lines.append(f"vae,{e},{metric},{v!r}")
    for metric, values in (wgan_history or {}).items():
        for e, v in enumerate(values):
            lines.append(f"adversarial,{e},{metric},{v!r}")
    Path(path).write_text("\n".join(lines) + "\n")
