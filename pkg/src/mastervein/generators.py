"""Vein-image generators and desk-corpus construction.

Two generator families satisfy the same interface: the procedural
spline-based synthesizer (a latent-parametrized stand-in for a real database
and a trained generative model) and an adapter around a learned decoder.
Both are deterministic functions of their latent vector, which is what the
latent-evolution attack needs to navigate.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .imaging import (
    FULL_HEIGHT,
    FULL_WIDTH,
    FingerMask,
    VeinImage,
    estimate_finger_mask,
    load_image,
    load_mask,
    quantize8,
    save_image,
    save_mask,
)
from .neural import DecoderNet, decoder_forward, resample_bilinear

PROCEDURAL_LATENT_DIM = 24
STROKES = 4
LATENT_RANGE = 3.0

# vertical center of each stroke band, as a fraction of image height
_BANDS = (0.30, 0.43, 0.57, 0.70)


class Generator(Protocol):
    """Anything that maps a latent vector to a canonical-size vein image."""

    latent_dim: int

    def generate(self, z: np.ndarray) -> VeinImage: ...


def procedural_vein(
    z: np.ndarray, width: int = FULL_WIDTH, height: int = FULL_HEIGHT
) -> VeinImage:
    """Render a synthetic vein image from a 24-float latent in [-3, 3]^24.

    The latent decodes into 4 strokes of 6 parameters each: the vertical
    positions of three control points, the stroke width, its depth, and a
    curvature bias that skews the arc's apex horizontally.  Strokes are
    quadratic splines with a dark Gaussian cross-profile, drawn on a bright
    finger-shaped background (rounded rectangle with a soft vignette).  The
    map is smooth in z, fully deterministic, and out-of-range latents are
    clamped with a warning.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (PROCEDURAL_LATENT_DIM,):
        raise ValueError(f"latent shape {z.shape} != ({PROCEDURAL_LATENT_DIM},)")
    if np.any(np.abs(z) > LATENT_RANGE):
        warnings.warn("latent outside [-3, 3] clamped")
        z = np.clip(z, -LATENT_RANGE, LATENT_RANGE)
    u = z.reshape(STROKES, 6) / LATENT_RANGE  # normalized to [-1, 1]

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = _finger_background(xx, yy, width, height)

    x0, x1 = 0.10 * width, 0.90 * width
    for k in range(STROKES):
        uy0, uy1, uy2, uw, ud, ubias = u[k]
        band = _BANDS[k] * height
        y0 = band + 0.05 * height * uy0
        y1 = band + 0.10 * height * uy1   # mid control point, bows the arc
        y2 = band + 0.05 * height * uy2
        xc = width * (0.5 + 0.08 * ubias)
        sigma_w = (2.2 + 0.7 * uw) * height / 240.0
        depth = 0.45 + 0.07 * ud
        dist2 = _stroke_distance2(xx, yy, x0, xc, x1, y0, y1, y2)
        img -= depth * np.exp(-dist2 / (2.0 * sigma_w ** 2))

    return VeinImage(np.clip(img, 0.02, 0.98).astype(np.float32))


def _finger_background(xx, yy, width, height):
    """Bright field with a slightly domed rounded-rectangle finger region."""
    px = xx - width / 2.0
    py = yy - height / 2.0
    hw, hh = 0.47 * width, 0.42 * height
    radius = 0.22 * height
    qx = np.abs(px) - (hw - radius)
    qy = np.abs(py) - (hh - radius)
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    sdf = outside + inside - radius   # < 0 inside the rounded rectangle
    # interior: gentle dome from 0.84 at the rim to 0.88 deep inside;
    # exterior: stays bright so only veins fall below the mask threshold
    tau = 0.15 * height
    interior = 0.84 + 0.04 * (1.0 - np.exp(sdf / tau))
    exterior = 0.84 + 0.09 * (1.0 - np.exp(-sdf / tau))
    return np.where(sdf < 0, interior, np.minimum(exterior, 0.93))


def _stroke_distance2(xx, yy, x0, xc, x1, y0, y1, y2):
    """Squared distance from each pixel to the quadratic spline, measured
    vertically along the arc and radially beyond its endpoints."""
    # invert x(t) = (1-t)^2 x0 + 2t(1-t) xc + t^2 x1 column by column
    a = x0 - 2.0 * xc + x1
    b = 2.0 * (xc - x0)
    cols = xx[0]
    c = x0 - cols
    if abs(a) < 1e-9:
        t = -c / b
    else:
        disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
        t = (-b + disc) / (2.0 * a)
    t = np.clip(t, 0.0, 1.0)
    curve_x = (1.0 - t) ** 2 * x0 + 2.0 * t * (1.0 - t) * xc + t ** 2 * x1
    curve_y = (1.0 - t) ** 2 * y0 + 2.0 * t * (1.0 - t) * y1 + t ** 2 * y2
    return (yy - curve_y[None, :]) ** 2 + (xx - curve_x[None, :]) ** 2


@dataclass(frozen=True)
class ProceduralGenerator:
    """Latent-parametrized procedural synthesizer at canonical size."""

    width: int = FULL_WIDTH
    height: int = FULL_HEIGHT
    latent_dim: int = PROCEDURAL_LATENT_DIM

    def generate(self, z: np.ndarray) -> VeinImage:
        return procedural_vein(z, self.width, self.height)


@dataclass(frozen=True)
class NeuralGenerator:
    """Adapter exposing a learned decoder as a canonical-size generator."""

    decoder: DecoderNet
    width: int = FULL_WIDTH
    height: int = FULL_HEIGHT

    @property
    def latent_dim(self) -> int:
        return self.decoder.latent_dim

    def generate(self, z: np.ndarray) -> VeinImage:
        img = decoder_forward(self.decoder, z)
        if (img.height, img.width) == (self.height, self.width):
            return img
        up = resample_bilinear(img.pixels, self.height, self.width)
        return VeinImage(np.clip(up, 0.0, 1.0).astype(np.float32))


def neural_generator(decoder: DecoderNet) -> NeuralGenerator:
    return NeuralGenerator(decoder)


# ---------------------------------------------------------------------------
# desk corpus


@dataclass(frozen=True)
class IdentityRecord:
    identity: str
    enroll: list[VeinImage]
    probe: list[VeinImage]
    mask: FingerMask


@dataclass(frozen=True)
class VeinCorpus:
    identities: list[IdentityRecord]
    seed: int
    jitter: float
    width: int
    height: int

    @property
    def n_identities(self) -> int:
        return len(self.identities)

    def all_enroll(self):
        """(identity, image, mask) triples over every enrollment sample."""
        for rec in self.identities:
            for img in rec.enroll:
                yield rec.identity, img, rec.mask

    def all_probe(self):
        for rec in self.identities:
            for img in rec.probe:
                yield rec.identity, img, rec.mask


def build_corpus(
    n_identities: int,
    samples_per_id: int,
    jitter: float = 0.15,
    seed: int = 0,
    width: int = FULL_WIDTH,
    height: int = FULL_HEIGHT,
) -> VeinCorpus:
    """Procedural corpus: one base latent per identity, per-sample latent
    jitter plus a mild global brightness jitter, split into enroll/probe
    halves.  Intensities are snapped to the 8-bit grid so the in-memory
    corpus equals its on-disk PGM round-trip.  One mask per identity (the
    union over its samples) keeps enroll and probe masks aligned.
    """
    if n_identities < 2 or samples_per_id < 2:
        raise ValueError("corpus needs at least 2 identities with 2 samples each")
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    rng = np.random.default_rng(seed)
    records = []
    for k in range(n_identities):
        # +-0.9 keeps identities distinct yet close enough that genuine and
        # impostor score ranges overlap slightly, as real systems do
        base = rng.uniform(-0.9, 0.9, PROCEDURAL_LATENT_DIM)
        images = []
        union = None
        for _ in range(samples_per_id):
            zs = np.clip(base + rng.normal(0.0, jitter, PROCEDURAL_LATENT_DIM), -3.0, 3.0)
            img = procedural_vein(zs, width, height)
            # brightness jitter scales with the latent jitter so a zero-jitter
            # corpus has bit-identical samples per identity
            shift = rng.normal(0.0, 0.1 * jitter)
            pixels = quantize8(img.pixels.astype(np.float64) + shift)
            img = VeinImage(pixels)
            images.append(img)
            m = estimate_finger_mask(img).bits
            union = m if union is None else (union | m)
        half = samples_per_id // 2
        records.append(
            IdentityRecord(
                identity=f"id{k:03d}",
                enroll=images[:half],
                probe=images[half:],
                mask=FingerMask(union),
            )
        )
    return VeinCorpus(records, seed=seed, jitter=jitter, width=width, height=height)


def save_corpus(corpus: VeinCorpus, root: str | Path) -> None:
    """Persist as corpus/<id>/<enroll|probe>/<k>.pgm + per-identity mask.pgm
    and a manifest recording the generation parameters."""
    root = Path(root)
    for rec in corpus.identities:
        for split, images in (("enroll", rec.enroll), ("probe", rec.probe)):
            d = root / rec.identity / split
            d.mkdir(parents=True, exist_ok=True)
            for k, img in enumerate(images):
                save_image(img, d / f"{k}.pgm")
        save_mask(rec.mask, root / rec.identity / "mask.pgm")
    manifest = {
        "seed": corpus.seed,
        "jitter": corpus.jitter,
        "width": corpus.width,
        "height": corpus.height,
        "n_identities": corpus.n_identities,
        "samples_per_id": len(corpus.identities[0].enroll) + len(corpus.identities[0].probe),
        "split": {"enroll": len(corpus.identities[0].enroll)},
        "identities": [rec.identity for rec in corpus.identities],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_corpus(root: str | Path) -> VeinCorpus:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    records = []
    for ident in manifest["identities"]:
        mask = load_mask(root / ident / "mask.pgm")
        splits = {}
        for split in ("enroll", "probe"):
            d = root / ident / split
            files = sorted(d.glob("*.pgm"), key=lambda p: int(p.stem))
            splits[split] = [load_image(p) for p in files]
        records.append(IdentityRecord(ident, splits["enroll"], splits["probe"], mask))
    return VeinCorpus(
        records,
        seed=manifest["seed"],
        jitter=manifest["jitter"],
        width=manifest["width"],
        height=manifest["height"],
    )
