"""Small fixed-architecture convolutional embedding matcher with manual
forward and backward passes, plus forward-only decoder inference.

The matcher is trained with an additive angular margin on the class logits
and tested with cosine similarity between embeddings.  Everything is written
against plain numpy so the exact input gradient (needed by the filtered
adversarial update) is available without an autodiff framework.

Architecture (fixed): input 1x48x64 (any image is bilinearly resampled to
64x48), passed through a fixed differentiable vein-enhancement stage
(positive second-derivative responses along four directions of the blurred
image, the same structure cue the handcrafted extractor keys on) ->
[conv3x3 + ReLU + maxpool2] x3 with 8/16/32 channels -> dense to a 64-float
embedding -> unit-norm class weight rows.  The enhancement stage has no
parameters; without it the raw rasters are so dominated by the common finger
background that angular-loss training stalls.  Convolutions keep spatial
size using replicate padding.  Weights are stored as 32-bit floats; the math
runs in float64 so finite-difference checks are meaningful.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import VeinImage

CNN_INPUT_W = 64
CNN_INPUT_H = 48
CNN_CHANNELS = (8, 16, 32)
EMBED_DIM = 64
FLAT_DIM = CNN_CHANNELS[-1] * (CNN_INPUT_H // 8) * (CNN_INPUT_W // 8)  # 32*6*8

DECODER_CHANNELS = (32, 16, 8, 1)
DECODER_BASES = ((3, 4), (30, 40))  # desk-scale 32x24 output, full-scale 320x240

_COS_EPS = 1e-7


class WeightFormatError(ValueError):
    """Raised for malformed VFW1 weight files."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


# ---------------------------------------------------------------------------
# model containers


@dataclass
class CnnModel:
    conv_w: list[np.ndarray]   # [(8,1,3,3), (16,8,3,3), (32,16,3,3)] float32
    conv_b: list[np.ndarray]   # [(8,), (16,), (32,)]
    dense_w: np.ndarray        # (64, 1536)
    dense_b: np.ndarray        # (64,)
    class_w: np.ndarray        # (n_classes, 64), rows unit-norm
    margin: float
    scale: float

    def __post_init__(self):
        expected = [
            (CNN_CHANNELS[0], 1, 3, 3),
            (CNN_CHANNELS[1], CNN_CHANNELS[0], 3, 3),
            (CNN_CHANNELS[2], CNN_CHANNELS[1], 3, 3),
        ]
        shapes = [w.shape for w in self.conv_w]
        if shapes != expected:
            raise ValueError(f"conv weights {shapes} do not match the fixed topology {expected}")
        if self.dense_w.shape != (EMBED_DIM, FLAT_DIM):
            raise ValueError(f"dense weights {self.dense_w.shape} != {(EMBED_DIM, FLAT_DIM)}")
        if self.class_w.ndim != 2 or self.class_w.shape[1] != EMBED_DIM:
            raise ValueError(f"class weights {self.class_w.shape} must be (N, {EMBED_DIM})")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError(f"margin must be in [0, pi/2), got {self.margin}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        for arr in [*self.conv_w, *self.conv_b, self.dense_w, self.dense_b, self.class_w]:
            if not np.isfinite(arr).all():
                raise ValueError("model contains non-finite weights")

    @property
    def n_classes(self) -> int:
        return self.class_w.shape[0]


@dataclass
class DecoderNet:
    """Latent -> image decoder: dense to a 32-channel base map, then three
    nearest-upsample + conv3x3 stages (32->16->8->1) with a sigmoid output."""

    dense_w: np.ndarray        # (32*base_h*base_w, latent_dim)
    dense_b: np.ndarray
    conv_w: list[np.ndarray]   # [(16,32,3,3), (8,16,3,3), (1,8,3,3)]
    conv_b: list[np.ndarray]

    def __post_init__(self):
        expected = [
            (DECODER_CHANNELS[1], DECODER_CHANNELS[0], 3, 3),
            (DECODER_CHANNELS[2], DECODER_CHANNELS[1], 3, 3),
            (DECODER_CHANNELS[3], DECODER_CHANNELS[2], 3, 3),
        ]
        shapes = [w.shape for w in self.conv_w]
        if shapes != expected:
            raise ValueError(f"decoder conv weights {shapes} do not match {expected}")
        rows = self.dense_w.shape[0]
        for bh, bw in DECODER_BASES:
            if rows == DECODER_CHANNELS[0] * bh * bw:
                self.base_h, self.base_w = bh, bw
                break
        else:
            raise ValueError(f"dense rows {rows} match no supported base map {DECODER_BASES}")
        for arr in [self.dense_w, self.dense_b, *self.conv_w, *self.conv_b]:
            if not np.isfinite(arr).all():
                raise ValueError("decoder contains non-finite weights")

    @property
    def latent_dim(self) -> int:
        return self.dense_w.shape[1]

    @property
    def output_size(self) -> tuple[int, int]:
        """(width, height) of generated images."""
        return self.base_w * 8, self.base_h * 8


# ---------------------------------------------------------------------------
# bilinear resampling (separable, exposed as an exact linear map)


_resample_cache: dict[tuple[int, int], np.ndarray] = {}


def _resample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D bilinear interpolation matrix with half-pixel-centered sampling."""
    key = (n_out, n_in)
    if key not in _resample_cache:
        r = np.zeros((n_out, n_in))
        scale = n_in / n_out
        for i in range(n_out):
            src = (i + 0.5) * scale - 0.5
            src = min(max(src, 0.0), n_in - 1.0)
            lo = int(math.floor(src))
            hi = min(lo + 1, n_in - 1)
            frac = src - lo
            r[i, lo] += 1.0 - frac
            r[i, hi] += frac
        _resample_cache[key] = r
    return _resample_cache[key]


def resample_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    ry = _resample_matrix(out_h, pixels.shape[0])
    rx = _resample_matrix(out_w, pixels.shape[1])
    return ry @ pixels.astype(np.float64) @ rx.T


def resample_bilinear_adjoint(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Transpose of :func:`resample_bilinear`, mapping gradients back."""
    ry = _resample_matrix(grad.shape[0], in_h)
    rx = _resample_matrix(grad.shape[1], in_w)
    return ry.T @ grad @ rx


# ---------------------------------------------------------------------------
# fixed vein-enhancement stage
#
# r = gain * sum over four directions of relu(second derivative of the
# blurred input along that direction).  Dark lines are dents, so their
# second derivative across the line is positive; the response map carries
# the centerline structure with the bright background removed.  Everything
# is a sandwich of fixed 1-D matrices, so the adjoint is exact.

ENHANCE_GAIN = 12.0
ENHANCE_BLUR_SIGMA = 1.2


def _blur_matrix(n: int, sigma: float) -> np.ndarray:
    ax = np.arange(n)
    m = np.exp(-((ax[None, :] - ax[:, None]) ** 2) / (2.0 * sigma ** 2))
    return m / m.sum(axis=1, keepdims=True)


def _shift_matrix(n: int, k: int) -> np.ndarray:
    m = np.zeros((n, n))
    for i in range(n):
        m[i, min(max(i + k, 0), n - 1)] = 1.0
    return m


class _Enhancer:
    def __init__(self, h: int, w: int):
        self.by = _blur_matrix(h, ENHANCE_BLUR_SIGMA)
        self.bx = _blur_matrix(w, ENHANCE_BLUR_SIGMA)
        self.d2y = _shift_matrix(h, 1) + _shift_matrix(h, -1) - 2.0 * np.eye(h)
        self.d2x = _shift_matrix(w, 1) + _shift_matrix(w, -1) - 2.0 * np.eye(w)
        self.sy1, self.sy_1 = _shift_matrix(h, 1), _shift_matrix(h, -1)
        self.sx1, self.sx_1 = _shift_matrix(w, 1), _shift_matrix(w, -1)

    def forward(self, s_in: np.ndarray):
        """s_in: (B, 1, H, W) resampled images -> (response, relu gates)."""
        x = s_in[:, 0]
        s = self.by @ x @ self.bx.T
        pres = [
            self.d2y @ s,                                                   # horizontal lines
            s @ self.d2x.T,                                                 # vertical lines
            self.sy1 @ s @ self.sx1.T + self.sy_1 @ s @ self.sx_1.T - 2.0 * s,
            self.sy1 @ s @ self.sx_1.T + self.sy_1 @ s @ self.sx1.T - 2.0 * s,
        ]
        out = sum(np.maximum(p, 0.0) for p in pres)
        gates = [p > 0.0 for p in pres]
        return (ENHANCE_GAIN * out)[:, None], gates

    def backward(self, grad: np.ndarray, gates) -> np.ndarray:
        g = ENHANCE_GAIN * grad[:, 0]
        g0, g1, g2, g3 = (g * gate for gate in gates)
        ds = self.d2y.T @ g0
        ds += g1 @ self.d2x
        ds += self.sy1.T @ g2 @ self.sx1 + self.sy_1.T @ g2 @ self.sx_1 - 2.0 * g2
        ds += self.sy1.T @ g3 @ self.sx_1 + self.sy_1.T @ g3 @ self.sx1 - 2.0 * g3
        return (self.by.T @ ds @ self.bx)[:, None]


_enhancer_cache: dict[tuple[int, int], _Enhancer] = {}


def _enhancer(h: int, w: int) -> _Enhancer:
    if (h, w) not in _enhancer_cache:
        _enhancer_cache[(h, w)] = _Enhancer(h, w)
    return _enhancer_cache[(h, w)]


# ---------------------------------------------------------------------------
# layer primitives (batched, float64)


def _pad_replicate(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")


def _pad_replicate_adjoint(dxp: np.ndarray) -> np.ndarray:
    d = dxp[:, :, 1:-1, 1:-1].copy()
    d[:, :, 0, :] += dxp[:, :, 0, 1:-1]
    d[:, :, -1, :] += dxp[:, :, -1, 1:-1]
    d[:, :, :, 0] += dxp[:, :, 1:-1, 0]
    d[:, :, :, -1] += dxp[:, :, 1:-1, -1]
    d[:, :, 0, 0] += dxp[:, :, 0, 0]
    d[:, :, 0, -1] += dxp[:, :, 0, -1]
    d[:, :, -1, 0] += dxp[:, :, -1, 0]
    d[:, :, -1, -1] += dxp[:, :, -1, -1]
    return d


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-size 3x3 convolution with replicate padding; returns (y, windows)."""
    xp = _pad_replicate(x)
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B,C,H,W,3,3)
    y = np.einsum("bchwuv,ocuv->bohw", win, w, optimize=True) + b[None, :, None, None]
    return y, win


def conv3x3_backward(dy: np.ndarray, win: np.ndarray, w: np.ndarray):
    """Gradients of conv3x3_forward; returns (dx, dw, db)."""
    dw = np.einsum("bohw,bchwuv->ocuv", dy, win, optimize=True)
    db = dy.sum(axis=(0, 2, 3))
    dyp = np.pad(dy, ((0, 0), (0, 0), (2, 2), (2, 2)))
    dwin = sliding_window_view(dyp, (3, 3), axis=(2, 3))  # (B,O,H+2,W+2,3,3)
    wflip = w[:, :, ::-1, ::-1]
    dxp = np.einsum("bohwuv,ocuv->bchw", dwin, wflip, optimize=True)
    return _pad_replicate_adjoint(dxp), dw, db


def maxpool2_forward(x: np.ndarray):
    b, c, h, w = x.shape
    r = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // 2, w // 2, 4
    )
    idx = r.argmax(axis=-1)  # first maximum wins ties
    y = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(dy: np.ndarray, idx: np.ndarray, h: int, w: int) -> np.ndarray:
    b, c = dy.shape[:2]
    r = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(r, idx[..., None], dy[..., None], axis=-1)
    return r.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


def _cnn_forward_batch(model: CnnModel, x: np.ndarray):
    """x: (B, 1, 48, 64) float64 resampled images -> (embeddings, cache)."""
    enhancer = _enhancer(x.shape[2], x.shape[3])
    x, gates = enhancer.forward(x)
    cache = {"stages": [], "enhance_gates": gates, "enhancer": enhancer}
    for w, b in zip(model.conv_w, model.conv_b):
        y, win = conv3x3_forward(x, w.astype(np.float64), b.astype(np.float64))
        a = np.maximum(y, 0.0)
        pooled, idx = maxpool2_forward(a)
        cache["stages"].append({"win": win, "pre": y, "idx": idx, "shape": a.shape})
        x = pooled
    flat = x.reshape(x.shape[0], -1)
    emb = flat @ model.dense_w.astype(np.float64).T + model.dense_b.astype(np.float64)
    cache["flat"] = flat
    cache["pool_out_shape"] = x.shape
    return emb, cache


def _cnn_backward_batch(model: CnnModel, cache, d_emb: np.ndarray, want_params: bool):
    """Backpropagate d_emb; returns (d_input, param_grads or None)."""
    flat = cache["flat"]
    grads = None
    if want_params:
        grads = {
            "dense_w": d_emb.T @ flat,
            "dense_b": d_emb.sum(axis=0),
            "conv_w": [],
            "conv_b": [],
        }
    d = (d_emb @ model.dense_w.astype(np.float64)).reshape(cache["pool_out_shape"])
    for stage, w in zip(reversed(cache["stages"]), reversed(model.conv_w)):
        _, _, h, wd = stage["shape"]
        d = maxpool2_backward(d, stage["idx"], h, wd)
        d = d * (stage["pre"] > 0.0)
        d, dw, db = conv3x3_backward(d, stage["win"], w.astype(np.float64))
        if want_params:
            grads["conv_w"].insert(0, dw)
            grads["conv_b"].insert(0, db)
    d = cache["enhancer"].backward(d, cache["enhance_gates"])
    return d, grads


# ---------------------------------------------------------------------------
# public forward / margin head / losses


def _as_input_batch(images) -> np.ndarray:
    arrs = []
    for img in images:
        px = img.pixels if isinstance(img, VeinImage) else np.asarray(img)
        if not np.isfinite(px).all():
            raise ValueError("image contains non-finite values")
        if px.shape != (CNN_INPUT_H, CNN_INPUT_W):
            px = resample_bilinear(px, CNN_INPUT_H, CNN_INPUT_W)
        arrs.append(px.astype(np.float64))
    return np.stack(arrs)[:, None, :, :]


def cnn_forward(model: CnnModel, image: VeinImage):
    """Embedding of one image plus the activation cache for backward."""
    x = _as_input_batch([image])
    emb, cache = _cnn_forward_batch(model, x)
    return emb[0].astype(np.float32), cache


def _normalized_rows(w: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(w, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("class weight row with zero norm")
    return w / norms


def _margin_head(model: CnnModel, emb: np.ndarray, target_mask: np.ndarray | None):
    """Scaled logits for a batch of embeddings (B, 64).

    ``target_mask`` is a (B, N) boolean; wherever true, the angular margin is
    added to that class's angle before scaling.  Returns (logits, aux) with
    the intermediates needed for the backward pass.
    """
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero embedding has no defined angle")
    en = emb / norms
    wn = _normalized_rows(model.class_w.astype(np.float64))
    cos = en @ wn.T  # (B, N)
    if target_mask is None:
        logits = model.scale * cos
        aux = {"en": en, "norms": norms, "wn": wn, "cos": cos, "mask": None}
        return logits, aux
    cos_c = np.clip(cos, -1.0 + _COS_EPS, 1.0 - _COS_EPS)
    theta = np.arccos(cos_c)
    shifted = np.cos(theta + model.margin)
    logits = model.scale * np.where(target_mask, shifted, cos)
    aux = {
        "en": en,
        "norms": norms,
        "wn": wn,
        "cos": cos,
        "cos_c": cos_c,
        "theta": theta,
        "mask": target_mask,
    }
    return logits, aux


def _margin_head_backward(model: CnnModel, aux, d_logits: np.ndarray, want_class_grad: bool):
    """d_logits (B, N) -> (d_emb (B, 64), d_class_w or None)."""
    mask = aux["mask"]
    if mask is None:
        dcos = model.scale * d_logits
    else:
        # d/dcos of cos(arccos(cos) + m) = sin(theta + m) / sqrt(1 - cos^2)
        slope = np.sin(aux["theta"] + model.margin) / np.sqrt(1.0 - aux["cos_c"] ** 2)
        dcos = model.scale * np.where(mask, slope, 1.0) * d_logits
    en, wn, norms = aux["en"], aux["wn"], aux["norms"]
    g = dcos @ wn  # (B, 64)
    d_emb = (g - np.sum(g * en, axis=1, keepdims=True) * en) / norms
    d_class = None
    if want_class_grad:
        dwn = dcos.T @ en  # (N, 64)
        w = model.class_w.astype(np.float64)
        wnorms = np.linalg.norm(w, axis=1, keepdims=True)
        d_class = (dwn - np.sum(dwn * wn, axis=1, keepdims=True) * wn) / wnorms
    return d_emb, d_class


def arcface_logits(
    embedding: np.ndarray, model: CnnModel, target_class: int | None = None
) -> np.ndarray:
    """Scaled cosine logits; the margin is applied to ``target_class`` only.

    With no target class (inference, e.g. for top-k label selection) the
    logits are plain scaled cosines.
    """
    emb = np.asarray(embedding, dtype=np.float64)[None, :]
    mask = None
    if target_class is not None:
        if not 0 <= target_class < model.n_classes:
            raise ValueError(f"target class {target_class} out of range")
        mask = np.zeros((1, model.n_classes), dtype=bool)
        mask[0, target_class] = True
    logits, _ = _margin_head(model, emb, mask)
    return logits[0]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))


def _validate_target(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n_classes,):
        raise ValueError(f"target vector shape {y.shape} != ({n_classes},)")
    if np.any(y < 0) or abs(float(y.sum()) - 1.0) > 1e-6:
        raise ValueError("target vector must be a distribution (non-negative, sums to 1)")
    return y


def loss_and_input_grad(model: CnnModel, image: VeinImage, y: np.ndarray):
    """Margin cross-entropy against the soft target y and its exact gradient
    with respect to the input pixels, at full image resolution.

    The margin is applied to every class with positive target mass.  The
    gradient flows through the bilinear resampling, so perturbation updates
    live at the original resolution.
    """
    y = _validate_target(y, model.n_classes)
    pixels = image.pixels if isinstance(image, VeinImage) else np.asarray(image)
    x = _as_input_batch([pixels])
    emb, cache = _cnn_forward_batch(model, x)
    mask = (y > 0.0)[None, :]
    logits, aux = _margin_head(model, emb, mask)
    logp = _log_softmax(logits)
    loss = float(-(y * logp[0]).sum())
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    d_logits = np.exp(logp) - y[None, :]
    d_emb, _ = _margin_head_backward(model, aux, d_logits, want_class_grad=False)
    d_input, _ = _cnn_backward_batch(model, cache, d_emb, want_params=False)
    h, w = pixels.shape
    zeta = resample_bilinear_adjoint(d_input[0, 0], h, w)
    return loss, zeta


def predict_probs(model: CnnModel, image: VeinImage) -> np.ndarray:
    """Inference class probabilities, softmax of the margin-free logits."""
    emb, _ = cnn_forward(model, image)
    logits = arcface_logits(emb, model)
    return np.exp(_log_softmax(logits))


def cosine_score(e1: np.ndarray, e2: np.ndarray) -> float:
    """Cosine similarity of two embeddings in [-1, 1]."""
    a = np.asarray(e1, dtype=np.float64)
    b = np.asarray(e2, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero embedding is undefined")
    return float(np.dot(a / na, b / nb))


# ---------------------------------------------------------------------------
# training


def init_cnn(n_classes: int, rng: np.random.Generator, margin: float = 0.5, scale: float = 16.0) -> CnnModel:
    """He-initialized model with unit-norm class weight rows."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    conv_w, conv_b = [], []
    in_ch = 1
    for out_ch in CNN_CHANNELS:
        std = math.sqrt(2.0 / (in_ch * 9))
        conv_w.append((rng.standard_normal((out_ch, in_ch, 3, 3)) * std).astype(np.float32))
        conv_b.append(np.zeros(out_ch, dtype=np.float32))
        in_ch = out_ch
    dense_w = (rng.standard_normal((EMBED_DIM, FLAT_DIM)) * math.sqrt(2.0 / FLAT_DIM)).astype(
        np.float32
    )
    dense_b = np.zeros(EMBED_DIM, dtype=np.float32)
    class_w = rng.standard_normal((n_classes, EMBED_DIM))
    class_w = (class_w / np.linalg.norm(class_w, axis=1, keepdims=True)).astype(np.float32)
    return CnnModel(conv_w, conv_b, dense_w, dense_b, class_w, margin, scale)


def train_cnn(
    images,
    labels,
    n_classes: int,
    epochs: int,
    lr: float,
    margin: float = 0.5,
    scale: float = 16.0,
    rng: np.random.Generator | None = None,
    batch_size: int = 16,
    momentum: float = 0.9,
):
    """Mini-batch SGD with momentum on the margin cross-entropy.

    Stability measures for the scale-free angular head: the margin ramps
    linearly from 0 to its full value over the first half of training, every
    weight tensor is rescaled to its initial Frobenius norm after each step
    (class weight rows individually to unit length), and biases stay at
    zero.  Without the rescaling, momentum along the always-perpendicular
    angular gradient inflates the embedding norm until learning freezes.

    Returns (model, history); history carries per-epoch loss and rank-1
    accuracy measured on the full training set at the full margin.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)
    if n_classes < 2 or np.any(counts < 2):
        raise ValueError("training needs >= 2 identities with >= 2 samples each")

    model = init_cnn(n_classes, rng, margin, scale)
    norms0 = [float(np.linalg.norm(w.astype(np.float64))) for w in model.conv_w]
    dense_norm0 = float(np.linalg.norm(model.dense_w.astype(np.float64)))
    x_all = _as_input_batch(images)
    m = x_all.shape[0]
    onehot = np.zeros((m, n_classes))
    onehot[np.arange(m), labels] = 1.0

    vel_conv = [np.zeros_like(w, dtype=np.float64) for w in model.conv_w]
    vel_dense = np.zeros((EMBED_DIM, FLAT_DIM))
    vel_class = np.zeros((n_classes, EMBED_DIM))
    history = {"epoch_loss": [], "epoch_accuracy": []}
    total_steps = epochs * ((m + batch_size - 1) // batch_size)
    warmup = max(1, total_steps // 2)
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(m)
        for start in range(0, m, batch_size):
            batch = perm[start : start + batch_size]
            xb, yb = x_all[batch], onehot[batch]
            model.margin = margin * min(1.0, step / warmup)
            emb, cache = _cnn_forward_batch(model, xb)
            logits, aux = _margin_head(model, emb, yb > 0.0)
            logp = _log_softmax(logits)
            loss = float(-(yb * logp).sum() / len(batch))
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at step {step}")
            if lr == 0.0:
                step += 1
                continue

            d_logits = (np.exp(logp) - yb) / len(batch)
            d_emb, d_class = _margin_head_backward(model, aux, d_logits, want_class_grad=True)
            _, grads = _cnn_backward_batch(model, cache, d_emb, want_params=True)

            for i in range(len(model.conv_w)):
                vel_conv[i] = momentum * vel_conv[i] - lr * grads["conv_w"][i]
                new_w = model.conv_w[i].astype(np.float64) + vel_conv[i]
                new_w *= norms0[i] / np.linalg.norm(new_w)
                model.conv_w[i] = new_w.astype(np.float32)
            vel_dense = momentum * vel_dense - lr * grads["dense_w"]
            new_dense = model.dense_w.astype(np.float64) + vel_dense
            new_dense *= dense_norm0 / np.linalg.norm(new_dense)
            model.dense_w = new_dense.astype(np.float32)
            vel_class = momentum * vel_class - lr * d_class
            new_class = model.class_w.astype(np.float64) + vel_class
            new_class /= np.linalg.norm(new_class, axis=1, keepdims=True)
            model.class_w = new_class.astype(np.float32)
            step += 1
        model.margin = margin
        epoch_loss, epoch_acc = _dataset_metrics(model, x_all, onehot, labels)
        history["epoch_loss"].append(epoch_loss)
        history["epoch_accuracy"].append(epoch_acc)
    model.margin = margin
    return model, history


def _dataset_metrics(model: CnnModel, x_all, onehot, labels):
    """Full-set margin loss and rank-1 accuracy at the full margin."""
    emb, _ = _cnn_forward_batch(model, x_all)
    logits, aux = _margin_head(model, emb, onehot > 0.0)
    logp = _log_softmax(logits)
    loss = float(-(onehot * logp).sum() / len(labels))
    acc = float((aux["cos"].argmax(axis=1) == labels).mean())
    return loss, acc


# ---------------------------------------------------------------------------
# decoder inference


def _upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def decoder_forward(decoder: DecoderNet, z: np.ndarray) -> VeinImage:
    """Deterministic decoder pass: dense -> ReLU -> 3x (upsample, conv),
    ReLU between stages and a sigmoid at the output."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (decoder.latent_dim,):
        raise ValueError(f"latent shape {z.shape} != ({decoder.latent_dim},)")
    h = decoder.dense_w.astype(np.float64) @ z + decoder.dense_b.astype(np.float64)
    x = np.maximum(h, 0.0).reshape(1, DECODER_CHANNELS[0], decoder.base_h, decoder.base_w)
    for i, (w, b) in enumerate(zip(decoder.conv_w, decoder.conv_b)):
        x = _upsample2(x)
        x, _ = conv3x3_forward(x, w.astype(np.float64), b.astype(np.float64))
        if i < len(decoder.conv_w) - 1:
            x = np.maximum(x, 0.0)
    out = 1.0 / (1.0 + np.exp(-x[0, 0]))
    return VeinImage(out.astype(np.float32))


# ---------------------------------------------------------------------------
# VFW1 weight files
#
# Little-endian layout: magic "VFW1"; u8 network type (1=CNN, 2=decoder);
# u32 layer count; per layer: u8 layer type, u8 rank, rank x u32 dims, then
# raw float32 data, weights followed by biases.  Layer types: 1 conv (bias
# length dims[0]), 2 dense (bias length dims[0]), 3 bare matrix (no bias),
# 4 scalar parameters (no bias).

_MAGIC = b"VFW1"
_NET_CNN = 1
_NET_DECODER = 2
_LAYER_CONV = 1
_LAYER_DENSE = 2
_LAYER_MATRIX = 3
_LAYER_SCALARS = 4


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_weights(obj: CnnModel | DecoderNet, path) -> None:
    """Serialize a model losslessly in the VFW1 format."""
    records = []
    if isinstance(obj, CnnModel):
        net_type = _NET_CNN
        for w, b in zip(obj.conv_w, obj.conv_b):
            records.append((_LAYER_CONV, w.shape, _f32_bytes(w) + _f32_bytes(b)))
        records.append(
            (_LAYER_DENSE, obj.dense_w.shape, _f32_bytes(obj.dense_w) + _f32_bytes(obj.dense_b))
        )
        records.append((_LAYER_MATRIX, obj.class_w.shape, _f32_bytes(obj.class_w)))
        head = np.array([obj.margin, obj.scale], dtype="<f4")
        records.append((_LAYER_SCALARS, (2,), head.tobytes()))
    elif isinstance(obj, DecoderNet):
        net_type = _NET_DECODER
        records.append(
            (_LAYER_DENSE, obj.dense_w.shape, _f32_bytes(obj.dense_w) + _f32_bytes(obj.dense_b))
        )
        for w, b in zip(obj.conv_w, obj.conv_b):
            records.append((_LAYER_CONV, w.shape, _f32_bytes(w) + _f32_bytes(b)))
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")

    parts = [_MAGIC, struct.pack("<BI", net_type, len(records))]
    for layer_type, shape, payload in records:
        parts.append(struct.pack("<BB", layer_type, len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(payload)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise WeightFormatError(f"truncated file: {what} at offset {self.offset}")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk


def _read_layers(reader: _Reader, count: int, schema):
    """Parse layer records, checking each against the expected (type, dims)
    before consuming its payload.  ``None`` entries in expected dims are free
    (class count, latent dimension)."""
    if count != len(schema):
        raise WeightFormatError(f"expected {len(schema)} layers, found {count}")
    layers = []
    for i, (want_type, want_dims) in enumerate(schema):
        layer_type, rank = struct.unpack("<BB", reader.take(2, f"layer {i} header"))
        if layer_type != want_type:
            raise WeightFormatError(
                f"layer {i}: expected layer type {want_type}, found {layer_type}"
            )
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"layer {i} dims"))
        if len(dims) != len(want_dims) or any(
            w is not None and d != w for d, w in zip(dims, want_dims)
        ):
            raise WeightFormatError(
                f"layer {i}: shape mismatch, expected {want_dims}, found {dims}"
            )
        n_weights = int(np.prod(dims)) if rank else 0
        n_bias = dims[0] if layer_type in (_LAYER_CONV, _LAYER_DENSE) else 0
        raw = reader.take(4 * (n_weights + n_bias), f"layer {i} data")
        flat = np.frombuffer(raw, dtype="<f4")
        weights = flat[:n_weights].reshape(dims).copy()
        bias = flat[n_weights:].copy()
        layers.append((layer_type, dims, weights, bias))
    return layers


def _expect(cond: bool, layer: int, msg: str):
    if not cond:
        raise WeightFormatError(f"layer {layer}: {msg}")


_CNN_SCHEMA = [
    (_LAYER_CONV, (CNN_CHANNELS[0], 1, 3, 3)),
    (_LAYER_CONV, (CNN_CHANNELS[1], CNN_CHANNELS[0], 3, 3)),
    (_LAYER_CONV, (CNN_CHANNELS[2], CNN_CHANNELS[1], 3, 3)),
    (_LAYER_DENSE, (EMBED_DIM, FLAT_DIM)),
    (_LAYER_MATRIX, (None, EMBED_DIM)),   # class count is free
    (_LAYER_SCALARS, (2,)),               # [margin, scale]
]

_DECODER_SCHEMA = [
    (_LAYER_DENSE, (None, None)),         # base map size and latent dim are free
    (_LAYER_CONV, (DECODER_CHANNELS[1], DECODER_CHANNELS[0], 3, 3)),
    (_LAYER_CONV, (DECODER_CHANNELS[2], DECODER_CHANNELS[1], 3, 3)),
    (_LAYER_CONV, (DECODER_CHANNELS[3], DECODER_CHANNELS[2], 3, 3)),
]


def load_weights(path) -> CnnModel | DecoderNet:
    """Load a VFW1 file, validating the descriptor against the fixed topology."""
    data = open(path, "rb").read()
    reader = _Reader(data)
    magic = reader.take(4, "magic")
    if magic != _MAGIC:
        raise WeightFormatError(f"bad magic {magic!r} at offset 0")
    net_type, count = struct.unpack("<BI", reader.take(5, "header"))
    if net_type == _NET_CNN:
        schema = _CNN_SCHEMA
    elif net_type == _NET_DECODER:
        schema = _DECODER_SCHEMA
    else:
        raise WeightFormatError(f"unknown network type code {net_type}")
    layers = _read_layers(reader, count, schema)
    if reader.offset != len(data):
        raise WeightFormatError(f"trailing bytes at offset {reader.offset}")

    if net_type == _NET_CNN:
        conv_w = [layers[i][2] for i in range(3)]
        conv_b = [layers[i][3] for i in range(3)]
        _, dims, cw, _ = layers[4]
        _expect(dims[0] >= 2, 4, f"need at least 2 classes, found {dims[0]}")
        head = layers[5][2]
        return CnnModel(conv_w, conv_b, layers[3][2], layers[3][3], cw, float(head[0]), float(head[1]))

    dense_w, dense_b = layers[0][2], layers[0][3]
    conv_w = [layers[i][2] for i in range(1, 4)]
    conv_b = [layers[i][3] for i in range(1, 4)]
    return DecoderNet(dense_w, dense_b, conv_w, conv_b)
