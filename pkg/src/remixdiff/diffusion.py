"""DDPM forward process, variance schedules, reverse sampling and guidance.

The forward process transforms clean data x0 into x_t = sqrt(abar_t) x0 +
sqrt(1 - abar_t) eps with abar_t the cumulative product of alpha_t = 1 - beta_t.
Reverse sampling queries a per-timestep noise predictor (a single model or one
expert per interval) and applies the standard posterior step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-timestep variances for a T-step chain (all arrays float64, length T)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        for name in ("beta", "alpha", "alpha_bar"):
            arr = getattr(self, name)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},), got {arr.shape}")
        if not ((self.beta > 0.0).all() and (self.beta < 1.0).all()):
            raise ValueError("beta values must lie strictly in (0, 1)")
        if self.T > 1 and not (np.diff(self.alpha_bar) < 0.0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        # Cumulative-product identity, re-derived with an explicit loop.
        prod = 1.0
        for t in range(self.T):
            prod *= self.alpha[t]
            if abs(prod - self.alpha_bar[t]) > 1e-12 * max(abs(prod), 1e-300):
                raise ValueError(f"alpha_bar[{t}] violates the cumulative product identity")


def build_schedule(
    kind: str = "linear",
    T: int = 100,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> DiffusionSchedule:
    """Linear variance schedule. T=1000 with the default betas is the classical
    setup; T=100 keeps desk-scale runs fast."""
    if kind != "linear":
        raise ValueError(f"unknown schedule kind '{kind}'")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"require 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


@dataclass
class SamplerConfig:
    """Reverse-process settings. ``guidance_scale`` follows the cfg convention;
    it only applies when a class label is passed to ``sample``."""

    n_steps: int = 100
    guidance_scale: float = 1.5
    stochastic: bool = True
    seed: int = 0

    def validate(self, T: int) -> None:
        if not (1 <= self.n_steps <= T):
            raise ValueError(f"n_steps must be in [1, {T}], got {self.n_steps}")
        if self.guidance_scale < 0.0:
            raise ValueError(f"guidance_scale must be >= 0, got {self.guidance_scale}")


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. ``t`` is scalar or (B,)."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 and eps shapes differ: {x0.shape} vs {eps.shape}")
    t = np.asarray(t)
    if (t < 0).any() or (t >= sched.T).any():
        raise ValueError(f"timestep out of range [0, {sched.T})")
    abar = sched.alpha_bar[t]
    if t.ndim > 0:
        abar = abar.reshape((-1,) + (1,) * (x0.ndim - 1))
    c0 = np.sqrt(abar)
    ce = np.sqrt(1.0 - abar)
    return (c0 * x0 + ce * eps).astype(x0.dtype, copy=False)


def ddpm_step(
    x_t: np.ndarray,
    eps_pred: np.ndarray,
    t: int,
    sched: DiffusionSchedule,
    rng: np.random.Generator | None = None,
    stochastic: bool = True,
) -> np.ndarray:
    """One reverse posterior step x_t -> x_{t-1} with sigma_t^2 = beta_t.

    Noise is added only when ``stochastic`` and t > 0; t = 0 is always
    deterministic.
    """
    if not (0 <= t < sched.T):
        raise ValueError(f"timestep {t} out of range [0, {sched.T})")
    if x_t.shape != eps_pred.shape:
        raise ValueError(f"x_t and eps_pred shapes differ: {x_t.shape} vs {eps_pred.shape}")
    beta = sched.beta[t]
    coef = beta / np.sqrt(1.0 - sched.alpha_bar[t])
    mean = (x_t - coef * eps_pred) / np.sqrt(sched.alpha[t])
    if stochastic and t > 0:
        if rng is None:
            raise ValueError("stochastic step requires an rng")
        z = rng.standard_normal(x_t.shape)
        mean = mean + np.sqrt(beta) * z
    out = mean.astype(x_t.dtype, copy=False)
    if not np.isfinite(out).all():
        raise ArithmeticError(f"non-finite state after reverse step t={t}")
    return out


def guided_eps(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guidance: eps_uncond + w * (eps_cond - eps_uncond)."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {eps_cond.shape} vs {eps_uncond.shape}")
    return eps_uncond + w * (eps_cond - eps_uncond)


def strided_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Evenly strided subset of [0, T), ascending, always containing 0 and T-1."""
    if not (1 <= n_steps <= T):
        raise ValueError(f"n_steps must be in [1, {T}], got {n_steps}")
    ts = np.unique(np.round(np.linspace(0, T - 1, n_steps)).astype(np.int64))
    return ts


def respaced_schedule(sched: DiffusionSchedule, timesteps: np.ndarray) -> DiffusionSchedule:
    """Schedule for the subsequence ``timesteps`` (ascending) of the full chain.

    Keeps abar at the selected original steps and re-derives per-step betas, so
    a DDPM step on the short chain matches the marginals of the long one.
    """
    abar = sched.alpha_bar[timesteps]
    prev = np.concatenate([[1.0], abar[:-1]])
    alpha = abar / prev
    beta = 1.0 - alpha
    return DiffusionSchedule(T=len(timesteps), beta=beta, alpha=alpha, alpha_bar=abar)


# An expert provider maps (x_t, original timestep t, labels or None) to the
# predicted noise for the whole batch.
ExpertProvider = Callable[[np.ndarray, int, np.ndarray | None], np.ndarray]


def sample(
    expert_provider: ExpertProvider,
    sched: DiffusionSchedule,
    cfg: SamplerConfig,
    n: int,
    sample_shape: tuple[int, ...],
    class_label: int | None = None,
    dtype=np.float32,
) -> np.ndarray:
    """Run the reverse chain, querying the provider at each (strided) timestep.

    With ``class_label`` set, the provider is queried both with labels and with
    None and the two predictions are combined with the guidance scale. Output
    is reproducible bit-for-bit from (seed, provider) within one process.
    """
    cfg.validate(sched.T)
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal((n,) + tuple(sample_shape)).astype(dtype)
    if n == 0:
        return x
    ts = strided_timesteps(sched.T, cfg.n_steps)
    sub = respaced_schedule(sched, ts) if len(ts) < sched.T else sched
    labels = None
    if class_label is not None:
        labels = np.full(n, class_label, dtype=np.int64)
    for j in range(len(ts) - 1, -1, -1):
        t_orig = int(ts[j])
        if labels is None:
            eps = expert_provider(x, t_orig, None)
        else:
            eps_cond = expert_provider(x, t_orig, labels)
            if cfg.guidance_scale == 1.0:
                eps = eps_cond
            else:
                eps_uncond = expert_provider(x, t_orig, None)
                eps = guided_eps(eps_cond, eps_uncond, cfg.guidance_scale)
        x = ddpm_step(x, eps, j, sub, rng, stochastic=cfg.stochastic)
    return x
