"""Covariance matrix adaptation evolution strategy, (mu/mu_w, lambda) with
cumulative step-size adaptation.

Strategy constants follow the published tutorial defaults (Hansen 2016):
log-rank recombination weights over the better half, rank-one plus rank-mu
covariance updates, and CSA step-size control.  The eigendecomposition is
refreshed every generation; problem dimensions here are small.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class CmaEsState:
    """Full strategy state; mutate only through :func:`cma_tell`."""

    dim: int
    mean: np.ndarray          # (dim,)
    sigma: float
    cov: np.ndarray           # (dim, dim), symmetric positive-definite
    p_sigma: np.ndarray       # evolution path for step-size control
    p_cov: np.ndarray         # evolution path for the rank-one update
    generation: int
    lam: int
    mu: int
    weights: np.ndarray       # (mu,), positive, decreasing, sums to 1
    mu_eff: float
    c_sigma: float
    d_sigma: float
    c_cov: float
    c1: float
    c_mu: float
    chi_n: float
    trace: list = field(default_factory=list)  # (gen, sigma, best, median, mean)

    def record(self, best: float, median: float) -> None:
        self.trace.append((self.generation, self.sigma, best, median, self.mean.copy()))


def cma_init(
    dim: int,
    mean0: np.ndarray | float = 0.0,
    sigma0: float = 1.0,
    lam: int | None = None,
) -> CmaEsState:
    """Fresh strategy state with tutorial default constants.

    ``lam`` defaults to 4 + floor(3 ln dim); callers may override it (the
    master-vein evolution harness uses 18).
    """
    if dim < 1:
        raise ValueError(f"dimension must be >= 1, got {dim}")
    if sigma0 <= 0:
        raise ValueError(f"sigma0 must be positive, got {sigma0}")
    if lam is None:
        lam = 4 + int(3 * math.log(dim))
    if lam < 2:
        raise ValueError(f"population size must be >= 2, got {lam}")

    mean = np.broadcast_to(np.asarray(mean0, dtype=np.float64), (dim,)).copy()
    mu = lam // 2
    raw = np.log((lam + 1) / 2.0) - np.log(np.arange(1, mu + 1))
    weights = raw / raw.sum()
    mu_eff = float(1.0 / np.sum(weights ** 2))

    c_sigma = (mu_eff + 2.0) / (dim + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (dim + 1.0)) - 1.0) + c_sigma
    c_cov = (4.0 + mu_eff / dim) / (dim + 4.0 + 2.0 * mu_eff / dim)
    c1 = 2.0 / ((dim + 1.3) ** 2 + mu_eff)
    c_mu = min(1.0 - c1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((dim + 2.0) ** 2 + mu_eff))
    chi_n = math.sqrt(dim) * (1.0 - 1.0 / (4.0 * dim) + 1.0 / (21.0 * dim ** 2))

    return CmaEsState(
        dim=dim,
        mean=mean,
        sigma=float(sigma0),
        cov=np.eye(dim),
        p_sigma=np.zeros(dim),
        p_cov=np.zeros(dim),
        generation=0,
        lam=lam,
        mu=mu,
        weights=weights,
        mu_eff=mu_eff,
        c_sigma=c_sigma,
        d_sigma=d_sigma,
        c_cov=c_cov,
        c1=c1,
        c_mu=c_mu,
        chi_n=chi_n,
    )


def _decompose(state: CmaEsState) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of C, resetting to identity if it has drifted."""
    try:
        eigvals, basis = np.linalg.eigh(state.cov)
    except np.linalg.LinAlgError:
        eigvals, basis = None, None
    if eigvals is None or not np.isfinite(eigvals).all():
        warnings.warn("covariance drifted non-decomposable; resetting to identity")
        state.cov = np.eye(state.dim)
        eigvals, basis = np.ones(state.dim), np.eye(state.dim)
    eigvals = np.maximum(eigvals, 1e-14)
    return eigvals, basis


def cma_ask(state: CmaEsState, rng: np.random.Generator) -> np.ndarray:
    """Sample lambda candidates, mean + sigma * B * D * N(0, I); shape (lam, dim)."""
    eigvals, basis = _decompose(state)
    normals = rng.standard_normal((state.lam, state.dim))
    return state.mean + state.sigma * (normals * np.sqrt(eigvals)) @ basis.T


def cma_tell(
    state: CmaEsState,
    candidates: np.ndarray,
    fitness: np.ndarray,
    maximize: bool = False,
) -> CmaEsState:
    """Rank the candidates and update mean, paths, step size, and covariance.

    Ranking is stable: ties keep candidate order.  Selection is purely
    rank-based, so adding a constant to all fitness values changes nothing.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    fitness = np.asarray(fitness, dtype=np.float64)
    if candidates.shape != (state.lam, state.dim):
        raise ValueError(f"expected {state.lam} candidates of dim {state.dim}")
    if fitness.shape != (state.lam,):
        raise ValueError(f"expected {state.lam} fitness values")
    if not np.isfinite(fitness).all():
        raise ValueError("fitness values must be finite")

    keys = -fitness if maximize else fitness
    order = np.argsort(keys, kind="stable")
    selected = candidates[order[: state.mu]]

    old_mean = state.mean
    new_mean = state.weights @ selected
    state.mean = new_mean
    shift = (new_mean - old_mean) / state.sigma

    eigvals, basis = _decompose(state)
    inv_sqrt = (basis / np.sqrt(eigvals)) @ basis.T  # C^(-1/2)

    cs, cc = state.c_sigma, state.c_cov
    state.p_sigma = (1.0 - cs) * state.p_sigma + math.sqrt(
        cs * (2.0 - cs) * state.mu_eff
    ) * (inv_sqrt @ shift)

    state.generation += 1
    ps_norm = float(np.linalg.norm(state.p_sigma))
    expected = math.sqrt(1.0 - (1.0 - cs) ** (2.0 * state.generation))
    h_sigma = 1.0 if ps_norm / expected < (1.4 + 2.0 / (state.dim + 1.0)) * state.chi_n else 0.0

    state.p_cov = (1.0 - cc) * state.p_cov + h_sigma * math.sqrt(
        cc * (2.0 - cc) * state.mu_eff
    ) * shift

    steps = (selected - old_mean) / state.sigma  # (mu, dim)
    rank_mu = (steps.T * state.weights) @ steps
    delta_h = (1.0 - h_sigma) * cc * (2.0 - cc)
    cov = (
        (1.0 - state.c1 - state.c_mu) * state.cov
        + state.c1 * (np.outer(state.p_cov, state.p_cov) + delta_h * state.cov)
        + state.c_mu * rank_mu
    )
    state.cov = 0.5 * (cov + cov.T)  # enforce exact symmetry

    state.sigma *= math.exp((cs / state.d_sigma) * (ps_norm / state.chi_n - 1.0))
    if not math.isfinite(state.sigma) or state.sigma <= 0:
        raise FloatingPointError(f"step size degenerated to {state.sigma}")

    best = float(fitness.max() if maximize else fitness.min())
    state.record(best, float(np.median(fitness)))
    return state


def minimize(
    fn,
    x0: np.ndarray,
    sigma0: float,
    rng: np.random.Generator,
    max_evals: int = 10000,
    f_target: float = -math.inf,
    lam: int | None = None,
):
    """Convenience ask/tell loop; returns (best_x, best_f, evaluations)."""
    x0 = np.asarray(x0, dtype=np.float64)
    state = cma_init(len(x0), x0, sigma0, lam)
    best_x, best_f, evals = x0.copy(), math.inf, 0
    while evals < max_evals and best_f > f_target:
        cands = cma_ask(state, rng)
        fits = np.array([fn(c) for c in cands])
        evals += state.lam
        i = int(np.argmin(fits))
        if fits[i] < best_f:
            best_f, best_x = float(fits[i]), cands[i].copy()
        cma_tell(state, cands, fits)
    return best_x, best_f, evals


def save_trace_csv(state: CmaEsState, path) -> None:
    """Per-generation trace: generation, sigma, best/median fitness, mean vector."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["generation", "sigma", "best_fitness", "median_fitness"]
            + [f"mean_{i}" for i in range(state.dim)]
        )
        for gen, sigma, best, median, mean in state.trace:
            writer.writerow([gen, repr(sigma), repr(best), repr(median)] + [repr(v) for v in mean])
