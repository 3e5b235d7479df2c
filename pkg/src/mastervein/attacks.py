"""The three master-vein attack procedures.

* Latent evolution: CMA-ES over a generator's latent space, fitness being the
  mean matcher score of the generated image against every enrolled template.
* The masked, kernel-filtered, k-label projected-gradient attack on the CNN
  matcher's training head: x <- Clip_{x0,eps}(x - alpha * (grad * K) . M).
  The update subtracts the filtered gradient because the targeted
  cross-entropy is being minimized; the raw gradient is used, not its sign.
* Their combination, which runs the gradient attack on the evolved image.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .cmaes import cma_ask, cma_init, cma_tell
from .imaging import FingerMask, Kernel, VeinImage, convolve2d, make_kernel
from .neural import CnnModel, loss_and_input_grad, predict_probs


class AttackError(RuntimeError):
    """Attack aborted; the message carries generation/candidate context."""


# ---------------------------------------------------------------------------
# latent variable evolution


@dataclass
class LveConfig:
    generator: object                     # Generator: latent_dim + generate(z)
    matcher: object                       # system with scores(image) -> array
    iterations: int
    population: int = 18
    sigma0: float = 0.8                   # initial latents ~ N(0, sigma0^2 I)
    seed: int = 0
    threads: int = 1                      # fan-out for per-candidate scoring

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")


@dataclass
class LveResult:
    best_image: VeinImage
    best_score: float
    history: list = field(default_factory=list)   # per generation (image, score)

    @property
    def best_scores(self) -> list[float]:
        return [s for _, s in self.history]


def _candidate_fitness(cfg: LveConfig, z: np.ndarray, generation: int, index: int):
    try:
        image = cfg.generator.generate(z)
        scores = cfg.matcher.scores(image)
    except Exception as exc:
        raise AttackError(
            f"matcher failed at generation {generation}, candidate {index}: {exc}"
        ) from exc
    return image, float(np.mean(scores))


def lve_run(cfg: LveConfig) -> LveResult:
    """Evolve the generator's latent space toward high mean matcher score.

    Each generation draws ``population`` latents, renders them, scores every
    image as the mean matcher score over the enrolled database, records the
    generation's best, and feeds the fitness back (maximizing).  Returns the
    global best across all generations; ties keep the earliest.
    """
    from .parallel import parallel_map

    rng = np.random.default_rng(cfg.seed)
    state = cma_init(cfg.generator.latent_dim, 0.0, cfg.sigma0, lam=cfg.population)
    if cfg.threads > 1 and hasattr(cfg.matcher, "bank"):
        probe = cfg.generator.generate(np.zeros(cfg.generator.latent_dim))
        cfg.matcher.bank.prewarm(probe.height, probe.width)
    history = []
    best_image, best_score = None, -np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # latent clamping is routine here
        for gen in range(cfg.iterations):
            cands = cma_ask(state, rng)
            results = parallel_map(
                lambda iz: _candidate_fitness(cfg, iz[1], gen, iz[0]),
                enumerate(cands),
                cfg.threads,
            )
            fitness = np.array([fit for _, fit in results])
            gen_idx = int(np.argmax(fitness))
            gen_img, gen_best = results[gen_idx][0], float(fitness[gen_idx])
            history.append((gen_img, gen_best))
            if gen_best > best_score:
                best_score, best_image = gen_best, gen_img
            cma_tell(state, cands, fitness, maximize=True)
    result = LveResult(best_image, best_score, history)
    assert result.best_score == max(result.best_scores)
    return result


def raw_sample_run(cfg: LveConfig) -> LveResult:
    """Generator sampling without evolution: the same latent distribution and
    budget as :func:`lve_run`, keeping each batch's best.  This is the
    baseline showing what raw generator output already achieves."""
    rng = np.random.default_rng(cfg.seed)
    history = []
    best_image, best_score = None, -np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for gen in range(cfg.iterations):
            gen_best, gen_img = -np.inf, None
            for i in range(cfg.population):
                z = rng.standard_normal(cfg.generator.latent_dim)
                image, fit = _candidate_fitness(cfg, z, gen, i)
                if fit > gen_best:
                    gen_best, gen_img = fit, image
            history.append((gen_img, gen_best))
            if gen_best > best_score:
                best_score, best_image = gen_best, gen_img
    return LveResult(best_image, best_score, history)


# ---------------------------------------------------------------------------
# k-label target vectors


@dataclass(frozen=True)
class TargetVector:
    """Soft-label target spreading probability 1/k over k classes."""

    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        k = int(np.count_nonzero(y))
        if y.ndim != 1 or np.any(y < 0) or abs(float(y.sum()) - 1.0) > 1e-9:
            raise ValueError("target vector must be non-negative and sum to 1")
        if not 1 < k < y.size:
            raise ValueError(f"target support {k} must satisfy 1 < k < {y.size}")
        y.flags.writeable = False
        object.__setattr__(self, "y", y)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.y)

    @property
    def k(self) -> int:
        return int(np.count_nonzero(self.y))


def resolve_k(n_classes: int, k: int | float) -> int:
    """Fraction or count -> a valid count: round fractions, floor at 2, and
    clamp below the class count (with a warning)."""
    count = int(round(k * n_classes)) if isinstance(k, float) and 0 < k < 1 else int(k)
    count = max(count, 2)
    if count >= n_classes:
        warnings.warn(f"k={count} clamped to {n_classes - 1} (must stay below the class count)")
        count = n_classes - 1
    return count


def build_target_vector(
    n_classes: int,
    k: int | float,
    mode: str = "random",
    class_probs: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> TargetVector:
    """k distinct target classes at probability 1/k each.

    ``random`` picks k distinct uniform indices from ``rng``; ``top`` picks
    the k classes with the highest predicted probability (ties by index).
    """
    if n_classes < 3:
        raise ValueError("need at least 3 classes for 1 < k < N")
    count = resolve_k(n_classes, k)
    if mode == "random":
        if rng is None:
            raise ValueError("random target selection needs an rng")
        idx = rng.choice(n_classes, size=count, replace=False)
    elif mode == "top":
        if class_probs is None:
            raise ValueError("top-k target selection needs class probabilities")
        probs = np.asarray(class_probs, dtype=np.float64)
        if probs.shape != (n_classes,):
            raise ValueError(f"class_probs shape {probs.shape} != ({n_classes},)")
        idx = np.argsort(-probs, kind="stable")[:count]
    else:
        raise ValueError(f"unknown target mode {mode!r}")
    y = np.zeros(n_classes)
    y[idx] = 1.0 / count
    return TargetVector(y)


# ---------------------------------------------------------------------------
# masked, filtered PGD


@dataclass
class AttackConfig:
    epsilon: float = 16.0 / 255.0
    alpha: float | None = None            # default epsilon / 10
    iterations: int = 100
    kernel: Kernel | None = None          # default gaussian 5x5, sigma 1
    mask: FingerMask | None = None        # required by pgd_attack
    k: int | float = 0.05
    mode: str = "top"                     # 'random' or 'top'
    recompute_targets: bool = False       # rebuild top-k labels every step
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.alpha is None:
            self.alpha = self.epsilon / 10.0
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.kernel is None:
            self.kernel = make_kernel("gaussian", 5, 1.0)


@dataclass
class PgdResult:
    image: VeinImage
    losses: list[float]
    target: TargetVector


def pgd_attack(model: CnnModel, x0: VeinImage, y: TargetVector, cfg: AttackConfig) -> PgdResult:
    """Iterate x <- Clip_{x0,eps}(x - alpha * (grad * K) . M) for T steps.

    The gradient of the targeted margin cross-entropy is filtered by the
    kernel, gated by the mask, applied raw (no sign), and every pixel is
    clipped to [x0-eps, x0+eps] intersected with [0, 1].  Pixels outside the
    mask never change.  With ``recompute_targets`` the top-k target vector is
    rebuilt from the current prediction each step.
    """
    if cfg.mask is None:
        raise ValueError("attack config carries no mask")
    if (cfg.mask.height, cfg.mask.width) != (x0.height, x0.width):
        raise ValueError("mask dimensions do not match the input image")
    if not cfg.mask.bits.any():
        raise ValueError("attack mask is empty")

    base = x0.pixels.astype(np.float64)
    lo = np.clip(base - cfg.epsilon, 0.0, 1.0)
    hi = np.clip(base + cfg.epsilon, 0.0, 1.0)
    gate = cfg.mask.bits.astype(np.float64)
    x = base.copy()
    losses = []
    for _ in range(cfg.iterations):
        if cfg.recompute_targets and cfg.mode == "top":
            probs = predict_probs(model, VeinImage(np.clip(x, 0.0, 1.0).astype(np.float32)))
            y = build_target_vector(model.n_classes, cfg.k, "top", class_probs=probs)
        loss, zeta = loss_and_input_grad(model, x, y.y)
        losses.append(loss)
        step = cfg.alpha * convolve2d(zeta, cfg.kernel) * gate
        x = np.clip(x - step, lo, hi)
    return PgdResult(VeinImage(x.astype(np.float32)), losses, y)


@dataclass
class CombinedResult:
    image: VeinImage
    lve: LveResult
    pgd: PgdResult


def combined_attack(lve_result: LveResult, model: CnnModel, cfg: AttackConfig) -> CombinedResult:
    """Gradient attack seeded with the evolved master vein; the target vector
    is built from the model's predictions on that image (or at random)."""
    x0 = lve_result.best_image
    rng = np.random.default_rng(cfg.seed)
    if cfg.mode == "top":
        probs = predict_probs(model, x0)
        y = build_target_vector(model.n_classes, cfg.k, "top", class_probs=probs)
    else:
        y = build_target_vector(model.n_classes, cfg.k, "random", rng=rng)
    pgd = pgd_attack(model, x0, y, cfg)
    return CombinedResult(pgd.image, lve_result, pgd)


def target_mass(model: CnnModel, image: VeinImage, target: TargetVector) -> float:
    """Total predicted probability on the target classes (margin-free)."""
    probs = predict_probs(model, image)
    return float(probs[target.support].sum())


def topk_sweep(
    model: CnnModel,
    x0: VeinImage,
    fractions,
    cfg: AttackConfig,
    system,
    threshold: float,
    rng: np.random.Generator | None = None,
):
    """Run the top-k attack at several k fractions and measure each result's
    FAR against the given system at its calibrated threshold.

    Returns rows of (fraction, k, far, initial target mass, final target
    mass); an empty fraction list yields an empty table.
    """
    from .evaluation import master_far

    rows = []
    for fraction in fractions:
        if not 0.0 < fraction < 1.0:
            raise ValueError(f"fractions must lie in (0, 1), got {fraction}")
        probs = predict_probs(model, x0)
        y = build_target_vector(model.n_classes, float(fraction), "top", class_probs=probs)
        before = target_mass(model, x0, y)
        result = pgd_attack(model, x0, y, cfg)
        after = target_mass(model, result.image, result.target)
        far = master_far(system, result.image, threshold, rng=rng)
        rows.append(
            {
                "fraction": float(fraction),
                "k": y.k,
                "far": far,
                "target_mass_before": before,
                "target_mass_after": after,
            }
        )
    return rows
