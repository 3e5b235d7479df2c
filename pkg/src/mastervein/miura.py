"""Handcrafted recognition pipeline: maximum-curvature vein extraction and the
normalized-overlap cross-correlation matcher, with full and partial matching.

The extractor marks vein centerlines at local maxima of the cross-sectional
profile curvature; because veins are dark, a profile crossing a vein is a dent
whose curvature peaks at the vein center.  The matcher slides the probe
pattern over the template and reports the best normalized overlap, 0.5 being
a perfect self-match.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.fft import irfft2, next_fast_len, rfft2

from .imaging import FingerMask, VeinImage

DEFAULT_SIGMA = 3.0
FULL_CW = 30
FULL_CH = 30
PARTIAL_CW = 8
PARTIAL_CH = 8

# profile directions: (dy, dx) steps and the matching run-labelling structures
_DIRECTIONS = (
    ((0, 1), np.array([[0, 0, 0], [1, 1, 1], [0, 0, 0]], bool)),   # horizontal
    ((1, 0), np.array([[0, 1, 0], [0, 1, 0], [0, 1, 0]], bool)),   # vertical
    ((1, 1), np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]], bool)),   # down-right
    ((1, -1), np.array([[0, 0, 1], [0, 1, 0], [1, 0, 0]], bool)),  # up-right
)


@dataclass(frozen=True)
class VeinPattern:
    """Binary centerline map; true bits mark detected vein centerlines."""

    bits: np.ndarray  # bool, shape (height, width)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.size == 0:
            raise ValueError(f"pattern must be a non-empty 2-D array, got {bits.shape}")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


@dataclass(frozen=True)
class MatchScore:
    """Normalized overlap score in [0, 0.5]; 0.5 is a perfect self-match."""

    value: float
    warning: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.value <= 0.5:
            raise ValueError(f"match score {self.value} outside [0, 0.5]")


def _shift(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate by (dy, dx), replicating edges."""
    h, w = arr.shape
    py0, py1 = max(dy, 0), max(-dy, 0)
    px0, px1 = max(dx, 0), max(-dx, 0)
    padded = np.pad(arr, ((py0, py1), (px0, px1)), mode="edge")
    return padded[py1 : py1 + h, px1 : px1 + w]


def curvature_scores(
    image: VeinImage, mask: FingerMask, sigma: float = DEFAULT_SIGMA
) -> np.ndarray:
    """Accumulated curvature-peak score plane (before connection/binarization).

    The image is Gaussian-smoothed, then the profile curvature
    kappa = P'' / (1 + P'^2)^1.5 is taken along the horizontal, vertical and
    both 45-degree directions (central differences, unit spacing).  At each
    local curvature maximum inside a positive-curvature run, the run width
    times kappa is added to the plane.  Nonzero entries mark candidate
    centerline pixels.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if (mask.height, mask.width) != (image.height, image.width):
        raise ValueError("mask dimensions do not match image")

    p = ndimage.gaussian_filter(image.pixels.astype(np.float64), sigma, mode="nearest")
    m = mask.bits
    scores = np.zeros_like(p)

    for (dy, dx), structure in _DIRECTIONS:
        fwd = _shift(p, -dy, -dx)   # value one step along the profile
        bwd = _shift(p, dy, dx)
        d1 = 0.5 * (fwd - bwd)
        d2 = fwd - 2.0 * p + bwd
        kappa = d2 / np.power(1.0 + d1 * d1, 1.5)
        kappa[~m] = 0.0

        pos = kappa > 0.0
        labels, n = ndimage.label(pos, structure=structure)
        if n == 0:
            continue
        widths = np.bincount(labels.ravel())
        is_peak = (
            pos
            & (kappa >= _shift(kappa, -dy, -dx))
            & (kappa >= _shift(kappa, dy, dx))
        )
        scores[is_peak] += kappa[is_peak] * widths[labels[is_peak]]
    return scores


def max_curvature(image: VeinImage, mask: FingerMask, sigma: float = DEFAULT_SIGMA) -> VeinPattern:
    """Extract the binary vein-centerline pattern of an image.

    Curvature-peak scores (:func:`curvature_scores`) are connected by the
    max-min neighborhood filter, then the plane is binarized at its median
    over masked pixels; everything outside the mask is zero.
    """
    scores = curvature_scores(image, mask, sigma)
    m = mask.bits

    # connect along each direction: a pixel inherits the weaker of the two
    # strongest scores flanking it, then the best direction wins
    connected = np.zeros_like(scores)
    for (dy, dx), _ in _DIRECTIONS:
        side_a = np.maximum(_shift(scores, -dy, -dx), _shift(scores, -2 * dy, -2 * dx))
        side_b = np.maximum(_shift(scores, dy, dx), _shift(scores, 2 * dy, 2 * dx))
        np.maximum(connected, np.minimum(side_a, side_b), out=connected)

    threshold = float(np.median(connected[m]))
    return VeinPattern((connected > threshold) & m)


def _window_sums(template: np.ndarray, wh: int, ww: int) -> np.ndarray:
    """Sum of template bits over every wh x ww sliding window (exact counts)."""
    integral = np.zeros((template.shape[0] + 1, template.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(template, axis=0, dtype=np.float64), axis=1, out=integral[1:, 1:])
    return (
        integral[wh:, ww:]
        - integral[:-wh, ww:]
        - integral[wh:, :-ww]
        + integral[:-wh, :-ww]
    )


def _overlap_map(template_bits: np.ndarray, probe_bits: np.ndarray) -> np.ndarray:
    """Integer overlap counts at every valid displacement (FFT correlation)."""
    th, tw = template_bits.shape
    ph, pw = probe_bits.shape
    fshape = (next_fast_len(th + ph - 1), next_fast_len(tw + pw - 1))
    ft = rfft2(template_bits.astype(np.float32), fshape)
    fp = rfft2(probe_bits[::-1, ::-1].astype(np.float32), fshape)
    full = irfft2(ft * fp, fshape)
    valid = full[ph - 1 : th, pw - 1 : tw]
    return np.rint(valid).astype(np.int64)


def miura_match(
    probe: VeinPattern, template: VeinPattern, cw: int = FULL_CW, ch: int = FULL_CH
) -> MatchScore:
    """Best normalized overlap of the probe against the template.

    The probe is cropped by (cw, ch) on each side and slid over the template
    across every in-bounds displacement; at each displacement the score is
    overlap / (probe bits + template window bits), and the maximum is
    returned.  An all-false probe crop scores 0 with a warning.
    """
    if probe.width > template.width or probe.height > template.height:
        raise ValueError(
            f"probe {probe.width}x{probe.height} exceeds template "
            f"{template.width}x{template.height}"
        )
    if cw < 0 or ch < 0 or 2 * cw >= probe.width or 2 * ch >= probe.height:
        raise ValueError(f"crop margins ({cw}, {ch}) leave no probe interior")

    probe_crop = probe.bits[ch : probe.height - ch, cw : probe.width - cw]
    probe_sum = int(probe_crop.sum())
    if probe_sum == 0:
        return MatchScore(0.0, warning="empty probe crop")

    overlap = _overlap_map(template.bits, probe_crop)
    win = _window_sums(template.bits, probe_crop.shape[0], probe_crop.shape[1])
    scores = overlap / (probe_sum + win)
    return MatchScore(float(scores.max()))


class TemplateBank:
    """Enrolled template patterns with cached FFTs for fast repeated matching.

    ``scores`` returns exactly the values of calling :func:`miura_match`
    against each template in turn; the cache only removes redundant FFT work.
    """

    def __init__(self, templates: list[VeinPattern], cw: int = FULL_CW, ch: int = FULL_CH):
        if not templates:
            raise ValueError("template bank needs at least one template")
        shapes = {(t.height, t.width) for t in templates}
        if len(shapes) != 1:
            raise ValueError("all templates in a bank must share dimensions")
        self.templates = templates
        self.cw = cw
        self.ch = ch
        self._tshape = templates[0].bits.shape
        self._fshape = None
        self._tffts = None
        self._win_cache: dict[tuple[int, int], list[np.ndarray]] = {}

    def _prepare(self, probe_shape):
        th, tw = self._tshape
        ph, pw = probe_shape
        fshape = (next_fast_len(th + ph - 1), next_fast_len(tw + pw - 1))
        if fshape != self._fshape:
            self._tffts = [rfft2(t.bits.astype(np.float32), fshape) for t in self.templates]
            self._fshape = fshape
        if probe_shape not in self._win_cache:
            self._win_cache[probe_shape] = [
                _window_sums(t.bits, ph, pw) for t in self.templates
            ]

    def prewarm(self, probe_height: int, probe_width: int) -> None:
        """Populate the FFT and window caches up front; call once before
        fanning scoring out over threads (lookups are then read-only)."""
        self._prepare((probe_height - 2 * self.ch, probe_width - 2 * self.cw))

    def scores(self, probe: VeinPattern) -> np.ndarray:
        th, tw = self._tshape
        if probe.width > tw or probe.height > th:
            raise ValueError("probe exceeds template dimensions")
        crop_bits = probe.bits[self.ch : probe.height - self.ch, self.cw : probe.width - self.cw]
        probe_sum = int(crop_bits.sum())
        if probe_sum == 0:
            return np.zeros(len(self.templates))
        ph, pw = crop_bits.shape
        self._prepare((ph, pw))
        fp = rfft2(crop_bits[::-1, ::-1].astype(np.float32), self._fshape)
        wins = self._win_cache[(ph, pw)]
        out = np.empty(len(self.templates))
        for i, ft in enumerate(self._tffts):
            full = irfft2(ft * fp, self._fshape)
            overlap = np.rint(full[ph - 1 : th, pw - 1 : tw]).astype(np.int64)
            out[i] = (overlap / (probe_sum + wins[i])).max()
        return out


def save_pattern(pattern: VeinPattern, path) -> None:
    """Serialize as PGM with values {0, 255}."""
    from .imaging import _write_pgm

    _write_pgm(np.where(pattern.bits, 255, 0).astype(np.uint8), path)


def load_pattern(path) -> VeinPattern:
    from .imaging import _load_gray8

    return VeinPattern(_load_gray8(path) > 127)


def miura_full_match(
    probe_img: VeinImage,
    template_pat: VeinPattern,
    mask: FingerMask,
    sigma: float = DEFAULT_SIGMA,
    cw: int = FULL_CW,
    ch: int = FULL_CH,
) -> MatchScore:
    """Full matching: extract the probe pattern, then match at +-(cw, ch)."""
    if (probe_img.height, probe_img.width) != (template_pat.height, template_pat.width):
        raise ValueError("full matching requires probe and template of equal size")
    probe_pat = max_curvature(probe_img, mask, sigma)
    return miura_match(probe_pat, template_pat, cw, ch)


def miura_partial_match(
    probe_img: VeinImage,
    template_pat: VeinPattern,
    mask: FingerMask,
    sigma: float = DEFAULT_SIGMA,
    cw: int = PARTIAL_CW,
    ch: int = PARTIAL_CH,
) -> MatchScore:
    """Partial matching: a cropped probe slid over the whole full template."""
    if probe_img.width >= template_pat.width or probe_img.height >= template_pat.height:
        raise ValueError("partial matching requires a probe strictly smaller than the template")
    probe_pat = max_curvature(probe_img, mask, sigma)
    return miura_match(probe_pat, template_pat, cw, ch)
