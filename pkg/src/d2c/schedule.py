"""Noise schedules, the forward perturbation x_t = α_t·x_0 + σ_t·ε, and the
two single-step reverse integrators used for sampling.

Three schedule kinds:
  * ``vp-continuous`` — variance-preserving, ᾱ(t) = exp(−½·19.9·t² − 0.1·t),
    α_t = √ᾱ, σ_t = √(1−ᾱ), so α² + σ² = 1 on t ∈ [0, 1];
  * ``linear-flow``   — α_t = 1−t, σ_t = t; pairs with velocity prediction,
    target v = ε − x_0;
  * ``ddpm-discrete`` — T-step chain, β_t linear, ᾱ_t = ∏(1−β_i), t ∈ {1..T}.

Schedules are immutable; RNGs are caller-supplied.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VP_BETA_MIN = 0.1
VP_BETA_SPAN = 19.9

KINDS = ("vp-continuous", "linear-flow", "ddpm-discrete")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int = 0                      # ddpm-discrete only
    betas: np.ndarray | None = field(default=None, repr=False)
    alphas_bar: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind '{self.kind}'; choose from {KINDS}")
        if self.kind == "ddpm-discrete":
            b = self.betas
            if b is None or self.alphas_bar is None or self.T != len(b):
                raise ValueError("ddpm-discrete schedule needs beta/alpha-bar tables")
            if np.any(b <= 0.0) or np.any(b >= 1.0):
                raise ValueError("betas must lie strictly inside (0, 1)")
            if np.any(np.diff(self.alphas_bar) >= 0.0):
                raise ValueError("alpha-bar table must be strictly decreasing")


@dataclass(frozen=True)
class PerturbedSample:
    x_t: np.ndarray
    t: object          # float (continuous) or int (discrete); array for batches
    epsilon: np.ndarray


def vp_continuous() -> NoiseSchedule:
    return NoiseSchedule(kind="vp-continuous")

def linear_flow() -> NoiseSchedule:
    return NoiseSchedule(kind="linear-flow")


def ddpm_discrete(T: int = 100, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(kind="ddpm-discrete", T=T, betas=betas,
                         alphas_bar=alphas_bar)


def make_schedule(kind: str, **kwargs) -> NoiseSchedule:
    if kind == "vp-continuous":
        return vp_continuous()
    if kind == "linear-flow":
        return linear_flow()
    if kind == "ddpm-discrete":
        return ddpm_discrete(**kwargs)
    raise ValueError(f"unknown schedule kind '{kind}'; choose from {KINDS}")


def _check_continuous_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"t={t} outside schedule domain [0, 1]")
    return t


def alpha_sigma(sched: NoiseSchedule, t):
    """The (α_t, σ_t) pair; vectorized over array-valued t."""
    if sched.kind == "vp-continuous":
        t = _check_continuous_t(t)
        abar = np.exp(-0.5 * VP_BETA_SPAN * t * t - VP_BETA_MIN * t)
        return np.sqrt(abar), np.sqrt(1.0 - abar)
    if sched.kind == "linear-flow":
        t = _check_continuous_t(t)
        return 1.0 - t, t + 0.0
    # ddpm-discrete: t in {1..T}, tables are 0-indexed
    ti = np.asarray(t)
    if np.any(ti < 1) or np.any(ti > sched.T):
        raise ValueError(f"t={t} outside schedule domain {{1..{sched.T}}}")
    abar = sched.alphas_bar[ti - 1]
    return np.sqrt(abar), np.sqrt(1.0 - abar)


def perturb(sched: NoiseSchedule, x0, t, rng: np.random.Generator) -> PerturbedSample:
    """Forward process: draw ε ~ N(0, I) and form x_t = α_t·x_0 + σ_t·ε.

    Batched when x0 is (n, D) and t is a length-n vector (α/σ broadcast
    per row).
    """
    x0 = np.asarray(getattr(x0, "data", x0))
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    a, s = alpha_sigma(sched, t)
    eps = rng.standard_normal(x0.shape)
    a = np.asarray(a)[..., None] if np.ndim(a) == 1 and x0.ndim == 2 else a
    s = np.asarray(s)[..., None] if np.ndim(s) == 1 and x0.ndim == 2 else s
    return PerturbedSample(x_t=a * x0 + s * eps, t=t, epsilon=eps)


def ddpm_reverse_step(sched: NoiseSchedule, x_t, t: int, eps_pred,
                      rng: np.random.Generator):
    """One reverse-chain step x_t -> x_{t-1} with σ²_t = β_t.

    mean = (1/√α_t)·(x_t − β_t/√(1−ᾱ_t)·ε̂); noise √β_t·z added for t > 1,
    none at t = 1 (the final, deterministic step).
    """
    if sched.kind != "ddpm-discrete":
        raise ValueError("ddpm_reverse_step requires a ddpm-discrete schedule")
    t = int(t)
    if t < 1 or t > sched.T:
        raise ValueError(f"t={t} outside schedule domain {{1..{sched.T}}}")
    beta = sched.betas[t - 1]
    abar = sched.alphas_bar[t - 1]
    x_t = np.asarray(x_t)
    eps_pred = np.asarray(eps_pred)
    mean = (x_t - beta / np.sqrt(1.0 - abar) * eps_pred) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean
    return mean + np.sqrt(beta) * rng.standard_normal(x_t.shape)


def euler_flow_step(x_t, t: float, v_pred, dt: float):
    """One Euler step toward data along the linear path: x_{t−Δt} = x_t − Δt·v.

    Δt = 0 is the identity; Δt must not exceed t.
    """
    if dt < 0.0 or dt > t:
        raise ValueError(f"dt={dt} outside (0, t={t}]")
    if dt == 0.0:
        return np.asarray(x_t).copy()
    return np.asarray(x_t) - dt * np.asarray(v_pred)
