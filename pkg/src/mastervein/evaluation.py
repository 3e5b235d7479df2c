"""Threshold calibration and the FAR-based master-vein evaluation protocol.

A "system" couples a matcher with an enrolled gallery and exposes per-template
scores for a probe image.  Full matching compares same-size images; partial
matching randomly crops the probe to 128x128 and slides it over the full
template.  The master-vein protocol replaces zero-effort impostor probes with
the master image and reports the fraction of identities falsely accepted at
the same threshold used for the bona fide measurement.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .imaging import (
    EmptyMaskError,
    FingerMask,
    PARTIAL_SIZE,
    VeinImage,
    crop,
    estimate_finger_mask,
    random_crop_corner,
)
from .generators import VeinCorpus
from .miura import (
    DEFAULT_SIGMA,
    FULL_CH,
    FULL_CW,
    PARTIAL_CH,
    PARTIAL_CW,
    TemplateBank,
    VeinPattern,
    max_curvature,
)
from .neural import CnnModel, cnn_forward, cosine_score


class MiuraSystem:
    """Maximum-curvature matcher over an enrolled template gallery."""

    def __init__(
        self,
        corpus: VeinCorpus,
        mode: str = "full",
        sigma: float = DEFAULT_SIGMA,
        cw: int | None = None,
        ch: int | None = None,
        templates: list[tuple[str, VeinPattern]] | None = None,
    ):
        if mode not in ("full", "partial"):
            raise ValueError(f"unknown matching mode {mode!r}")
        self.mode = mode
        self.sigma = sigma
        self.cw = cw if cw is not None else (FULL_CW if mode == "full" else PARTIAL_CW)
        self.ch = ch if ch is not None else (FULL_CH if mode == "full" else PARTIAL_CH)
        self.template_ids: list[str] = []
        patterns = []
        if templates is None:
            # enroll by extracting a pattern from every enrollment image
            for ident, img, mask in corpus.all_enroll():
                self.template_ids.append(ident)
                patterns.append(max_curvature(img, mask, sigma))
        else:
            for ident, pattern in templates:
                self.template_ids.append(ident)
                patterns.append(pattern)
        self.bank = TemplateBank(patterns, cw=self.cw, ch=self.ch)
        self.corpus = corpus

    @property
    def name(self) -> str:
        return f"miura-{self.mode}"

    def probe_pattern(self, image: VeinImage, mask: FingerMask | None) -> VeinPattern:
        """Extract the probe pattern; an unusable probe yields an empty
        pattern (scores 0 everywhere) with a warning.

        Probes without a provided mask get one estimated at the default
        threshold; bright low-contrast probes (e.g. learned-generator output)
        fall back to the midpoint of their own intensity range before being
        declared unusable.
        """
        if mask is None:
            lo, hi = float(image.pixels.min()), float(image.pixels.max())
            for threshold in (0.5, 0.5 * (lo + hi)):
                if not 0.0 < threshold < 1.0:
                    continue
                try:
                    mask = estimate_finger_mask(image, threshold=threshold)
                    break
                except EmptyMaskError:
                    continue
            if mask is None:
                warnings.warn("probe has no usable finger region; scoring as empty")
                return VeinPattern(np.zeros((image.height, image.width), dtype=bool))
        return max_curvature(image, mask, self.sigma)

    def scores(
        self,
        image: VeinImage,
        mask: FingerMask | None = None,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Scores of one probe image against every enrolled template.

        In partial mode the probe is first randomly cropped to 128x128 using
        ``rng`` (required), mask cropped alongside.
        """
        if self.mode == "partial":
            if rng is None:
                raise ValueError("partial matching needs an rng for the random crop")
            cs = PARTIAL_SIZE
            x, y = random_crop_corner(image.width, image.height, cs, cs, rng)
            image = crop(image, x, y, cs, cs)
            if mask is not None:
                sub = mask.bits[y : y + cs, x : x + cs]
                mask = FingerMask(sub) if sub.any() else None
        pattern = self.probe_pattern(image, mask)
        if not pattern.bits.any():
            return np.zeros(len(self.template_ids))
        return self.bank.scores(pattern)


class CnnSystem:
    """Cosine-similarity matcher over enrolled CNN embeddings (full matching)."""

    def __init__(self, corpus: VeinCorpus, model: CnnModel):
        self.model = model
        self.template_ids: list[str] = []
        self._embeddings = []
        for ident, img, _ in corpus.all_enroll():
            self.template_ids.append(ident)
            emb, _ = cnn_forward(model, img)
            self._embeddings.append(emb)
        self.corpus = corpus
        self.mode = "full"

    @property
    def name(self) -> str:
        return "cnn"

    def scores(
        self,
        image: VeinImage,
        mask: FingerMask | None = None,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        emb, _ = cnn_forward(self.model, image)
        return np.array([cosine_score(emb, t) for t in self._embeddings])


def score_matrix(system, rng: np.random.Generator | None = None, threads: int = 1):
    """Genuine and impostor score lists over the system's corpus probes.

    Every probe is matched against every enrolled template: same-identity
    pairs are genuine, the rest impostor.  Partial-mode crop corners draw
    from ``rng`` in corpus order before any fan-out, so results are
    deterministic per seed and independent of the thread count.
    """
    from .parallel import parallel_map

    probes = [
        (rec.identity, img, rec.mask)
        for rec in system.corpus.identities
        for img in rec.probe
    ]
    if system.mode == "partial":
        if rng is None:
            raise ValueError("partial matching needs an rng for the random crops")
        cs = PARTIAL_SIZE
        prepared = []
        for ident, img, mask in probes:
            x, y = random_crop_corner(img.width, img.height, cs, cs, rng)
            sub = mask.bits[y : y + cs, x : x + cs]
            prepared.append(
                (ident, crop(img, x, y, cs, cs), FingerMask(sub) if sub.any() else None)
            )
        probes = prepared
    if threads > 1 and hasattr(system, "bank") and probes:
        system.bank.prewarm(probes[0][1].height, probes[0][1].width)

    def score_one(entry):
        ident, img, mask = entry
        pattern_scores = system.scores(img, mask) if system.mode != "partial" else None
        if pattern_scores is None:
            pattern = system.probe_pattern(img, mask)
            pattern_scores = (
                system.bank.scores(pattern)
                if pattern.bits.any()
                else np.zeros(len(system.template_ids))
            )
        return ident, pattern_scores

    genuine, impostor = [], []
    for ident, scores in parallel_map(score_one, probes, threads):
        for tid, v in zip(system.template_ids, scores):
            (genuine if tid == ident else impostor).append(float(v))
    if not impostor:
        warnings.warn("corpus has a single identity; impostor score set is empty")
    return np.array(genuine), np.array(impostor)


def calibrate_threshold(genuine, impostor) -> float:
    """Equal-error-rate threshold.

    Acceptance is score >= threshold.  FAR and FRR are step functions that
    change only at observed scores, so |FAR - FRR| is constant on the
    intervals between consecutive distinct scores; the threshold returned is
    the midpoint of the minimizing interval, ties resolved toward lower FAR.
    """
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("calibration needs nonempty genuine and impostor scores")
    values = np.unique(np.concatenate([genuine, impostor]))
    span = values[-1] - values[0] if values.size > 1 else 1.0
    # interval edges: below the smallest score, between scores, above the largest
    edges = np.concatenate([[values[0] - span], values, [values[-1] + span]])
    best = None
    for lo, hi in zip(edges[:-1], edges[1:]):
        t = 0.5 * (lo + hi)
        far = float(np.mean(impostor >= t))
        frr = float(np.mean(genuine < t))
        key = (abs(far - frr), far)
        if best is None or key < best[0]:
            best = (key, t)
    return best[1]


def compute_far(impostor_scores, threshold: float) -> float:
    """Fraction of impostor scores at or above the threshold."""
    scores = np.asarray(impostor_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot compute FAR of an empty score set")
    return float(np.mean(scores >= threshold))


def compute_frr(genuine_scores, threshold: float) -> float:
    scores = np.asarray(genuine_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot compute FRR of an empty score set")
    return float(np.mean(scores < threshold))


def master_far(
    system,
    master: VeinImage,
    threshold: float,
    rng: np.random.Generator | None = None,
    exclude_identity: str | None = None,
) -> float:
    """Fraction of enrolled identities falsely accepting the master probe.

    The master is matched against every identity's templates; an identity is
    accepted if any of its templates scores at or above the threshold.  In
    partial mode each identity sees a fresh random crop of the master, like
    any other impostor presentation.  ``exclude_identity`` removes an
    identity (used when the "master" is itself an enrolled sample).
    """
    ids = [rec.identity for rec in system.corpus.identities if rec.identity != exclude_identity]
    accepted = {i: False for i in ids}
    if system.mode == "partial":
        for ident in ids:
            s = system.scores(master, None, rng=rng)
            for tid, v in zip(system.template_ids, s):
                if tid == ident and v >= threshold:
                    accepted[ident] = True
    else:
        s = system.scores(master, None, rng=rng)
        for tid, v in zip(system.template_ids, s):
            if tid in accepted and v >= threshold:
                accepted[tid] = True
    return float(np.mean([accepted[i] for i in ids]))


@dataclass
class EvalReport:
    """Bona fide calibration plus master FARs at the same threshold."""

    system: str
    mode: str
    threshold: float
    eer: float
    genuine_count: int
    impostor_count: int
    genuine_mean: float
    impostor_far: float
    frr: float
    master_fars: dict = field(default_factory=dict)
    seed: int | None = None

    def to_json(self) -> str:
        payload = {
            "system": self.system,
            "mode": self.mode,
            "threshold": self.threshold,
            "eer": self.eer,
            "genuine_count": self.genuine_count,
            "impostor_count": self.impostor_count,
            "genuine_mean": self.genuine_mean,
            "impostor_far": self.impostor_far,
            "frr": self.frr,
            "master_fars": self.master_fars,
            "seed": self.seed,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def evaluate_system(
    system,
    masters: dict[str, VeinImage] | None = None,
    seed: int | None = None,
    threads: int = 1,
) -> EvalReport:
    """Calibrate the system at its EER point and measure each master's FAR."""
    rng = np.random.default_rng(seed) if seed is not None else None
    genuine, impostor = score_matrix(system, rng=rng, threads=threads)
    threshold = calibrate_threshold(genuine, impostor)
    far = compute_far(impostor, threshold)
    frr = compute_frr(genuine, threshold)
    report = EvalReport(
        system=system.name,
        mode=system.mode,
        threshold=threshold,
        eer=0.5 * (far + frr),
        genuine_count=int(genuine.size),
        impostor_count=int(impostor.size),
        genuine_mean=float(genuine.mean()),
        impostor_far=far,
        frr=frr,
        seed=seed,
    )
    for name, image in (masters or {}).items():
        mrng = np.random.default_rng(seed) if seed is not None else None
        report.master_fars[name] = master_far(system, image, threshold, rng=mrng)
    return report
