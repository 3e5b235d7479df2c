"""Raster types, grayscale I/O, convolution, crops and finger-mask estimation.

Conventions used across the whole package:

* intensities are 32-bit floats in [0, 1]; veins are dark (low intensity),
  the finger body is bright, as in near-infrared captures;
* arrays are row-major ``(height, width)``;
* the canonical full frame is 320x240, partial probes are 128x128;
* every border is handled by edge replication.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

FULL_WIDTH = 320
FULL_HEIGHT = 240
PARTIAL_SIZE = 128

KERNEL_KINDS = ("gaussian", "lowpass", "highpass", "laplacian", "dirac")


class ImageFormatError(ValueError):
    """Raised for unreadable or unsupported image files."""


class EmptyMaskError(ValueError):
    """Raised when mask estimation produces no foreground pixels."""


@dataclass(frozen=True)
class VeinImage:
    """Grayscale raster with intensities in [0, 1]."""

    pixels: np.ndarray  # float32, shape (height, width)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.size == 0:
            raise ValueError(f"image must be a non-empty 2-D array, got shape {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("image contains non-finite intensities")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class FingerMask:
    """Boolean region-of-interest mask; true marks the usable finger area."""

    bits: np.ndarray  # bool, shape (height, width)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.size == 0:
            raise ValueError(f"mask must be a non-empty 2-D array, got shape {bits.shape}")
        if not bits.any():
            raise EmptyMaskError("mask has no true bits")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


@dataclass(frozen=True)
class Kernel:
    """Square convolution kernel with an odd number of taps per side."""

    kind: str
    taps: np.ndarray  # float32, shape (size, size)

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        taps = np.asarray(self.taps, dtype=np.float32)
        if taps.ndim != 2 or taps.shape[0] != taps.shape[1] or taps.shape[0] % 2 == 0:
            raise ValueError(f"kernel taps must be square with odd side, got {taps.shape}")
        taps.flags.writeable = False
        object.__setattr__(self, "taps", taps)

    @property
    def size(self) -> int:
        return self.taps.shape[0]


def make_kernel(kind: str, size: int, sigma: float | None = None) -> Kernel:
    """Build one of the supported filter kernels.

    gaussian  sampled 2-D Gaussian, L1-normalized (requires ``sigma`` > 0)
    lowpass   box mean, taps 1/size^2
    highpass  unit impulse minus the box mean (taps sum to 0)
    laplacian the 3x3 stencil [0,1,0; 1,-4,1; 0,1,0], centered in larger sizes
    dirac     unit impulse
    """
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {size}")
    if kind == "gaussian":
        if sigma is None or sigma <= 0:
            raise ValueError("gaussian kernel requires sigma > 0")
        half = size // 2
        ax = np.arange(-half, half + 1, dtype=np.float64)
        g1 = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
        taps = np.outer(g1, g1)
        taps /= taps.sum()
    elif kind == "lowpass":
        taps = np.full((size, size), 1.0 / (size * size), dtype=np.float64)
    elif kind == "highpass":
        taps = np.full((size, size), -1.0 / (size * size), dtype=np.float64)
        taps[size // 2, size // 2] += 1.0
    elif kind == "laplacian":
        if size < 3:
            raise ValueError("laplacian kernel requires size >= 3")
        taps = np.zeros((size, size), dtype=np.float64)
        c = size // 2
        taps[c - 1 : c + 2, c - 1 : c + 2] = [[0, 1, 0], [1, -4, 1], [0, 1, 0]]
    elif kind == "dirac":
        taps = np.zeros((size, size), dtype=np.float64)
        taps[size // 2, size // 2] = 1.0
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    return Kernel(kind=kind, taps=taps.astype(np.float32))


def convolve2d(image: VeinImage | np.ndarray, kernel: Kernel) -> np.ndarray:
    """True 2-D convolution (kernel flipped) with replicate-edge borders.

    Output has the input's shape and dtype; values are not clipped, so the
    result is a float map rather than a :class:`VeinImage`.
    """
    arr = image.pixels if isinstance(image, VeinImage) else np.asarray(image)
    if kernel.size > min(arr.shape):
        raise ValueError(
            f"kernel size {kernel.size} exceeds image extent {arr.shape[1]}x{arr.shape[0]}"
        )
    return ndimage.convolve(arr, kernel.taps.astype(arr.dtype), mode="nearest")


def crop(image: VeinImage, x: int, y: int, cw: int, ch: int) -> VeinImage:
    """Verbatim sub-window with top-left corner (x, y)."""
    if cw < 1 or ch < 1 or x < 0 or y < 0 or x + cw > image.width or y + ch > image.height:
        raise ValueError(
            f"crop {cw}x{ch}@({x},{y}) out of bounds for {image.width}x{image.height}"
        )
    return VeinImage(image.pixels[y : y + ch, x : x + cw])


def random_crop_corner(
    width: int, height: int, cw: int, ch: int, rng: np.random.Generator
) -> tuple[int, int]:
    """Uniform top-left corner for a cw x ch crop; draws x first, then y."""
    if cw > width or ch > height:
        raise ValueError(f"crop {cw}x{ch} larger than image {width}x{height}")
    x = int(rng.integers(0, width - cw + 1))
    y = int(rng.integers(0, height - ch + 1))
    return x, y


def random_crop(image: VeinImage, cw: int, ch: int, rng: np.random.Generator) -> VeinImage:
    """Uniformly random cw x ch sub-window, deterministic for a seeded rng."""
    x, y = random_crop_corner(image.width, image.height, cw, ch, rng)
    return crop(image, x, y, cw, ch)


def estimate_finger_mask(
    image: VeinImage, threshold: float = 0.5, dilation: int = 4
) -> FingerMask:
    """Region-of-interest mask from dark pixels.

    Pixels darker than ``threshold`` are dilated ``dilation`` times with a
    3x3 structuring element, then holes (false regions not connected to the
    border) are filled.  Raises :class:`EmptyMaskError` when nothing is dark
    enough, signalling an unusable input.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if dilation < 0:
        raise ValueError("dilation must be >= 0")
    dark = image.pixels < threshold
    if dilation > 0:
        dark = ndimage.binary_dilation(dark, structure=np.ones((3, 3), bool), iterations=dilation)
    filled = ndimage.binary_fill_holes(dark)
    if not filled.any():
        raise EmptyMaskError("no pixels below threshold; cannot estimate a finger mask")
    return FingerMask(filled)


# ---------------------------------------------------------------------------
# File I/O: binary PGM (P5, maxval 255) is the canonical interchange format;
# 8-bit grayscale PNG is accepted for convenience.


def _parse_pgm(data: bytes, path: Path) -> np.ndarray:
    # header = magic, width, height, maxval; '#' comments allowed between tokens
    tokens = []
    pos = 2  # past 'P5'
    while len(tokens) < 3:
        m = re.match(rb"(?:\s+|#[^\n]*\n)*(\d+)", data[pos:])
        if m is None:
            raise ImageFormatError(f"{path}: truncated PGM header")
        tokens.append(int(m.group(1)))
        pos += m.end()
    width, height, maxval = tokens
    if width == 0 or height == 0:
        raise ImageFormatError(f"{path}: zero image dimension {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 PGM is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise ImageFormatError(f"{path}: PGM raster truncated")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def _load_gray8(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from exc
    if data[:2] == b"P5":
        return _parse_pgm(data, path)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode != "L":
                raise ImageFormatError(f"{path}: only 8-bit grayscale PNG is supported")
            arr = np.asarray(im, dtype=np.uint8)
        if arr.size == 0:
            raise ImageFormatError(f"{path}: zero image dimension")
        return arr
    raise ImageFormatError(f"{path}: unsupported format (expected binary PGM or grayscale PNG)")


def load_image(path: str | Path) -> VeinImage:
    """Load an 8-bit grayscale PGM (binary P5) or PNG, mapping v -> v/255."""
    arr = _load_gray8(path)
    return VeinImage((arr.astype(np.float32)) / np.float32(255.0))


def save_image(image: VeinImage, path: str | Path) -> None:
    """Write a binary P5 PGM, quantizing intensities to round(v*255)."""
    arr = np.rint(image.pixels.astype(np.float64) * 255.0).astype(np.uint8)
    _write_pgm(arr, path)


def load_mask(path: str | Path) -> FingerMask:
    """Load a mask stored as PGM with values {0, 255}."""
    arr = _load_gray8(path)
    return FingerMask(arr > 127)


def save_mask(mask: FingerMask, path: str | Path) -> None:
    _write_pgm(np.where(mask.bits, 255, 0).astype(np.uint8), path)


def _write_pgm(arr: np.ndarray, path: str | Path) -> None:
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


def quantize8(values: np.ndarray) -> np.ndarray:
    """Snap intensities to the 8-bit grid used by the PGM interchange format."""
    return (np.rint(np.clip(values, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)
