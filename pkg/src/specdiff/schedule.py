"""DDPM noise-schedule mathematics.

Timesteps run ``T .. 1`` while sampling and ``t = 0`` is the clean sample.
Per-step arrays are stored with length ``T``; entry ``t - 1`` belongs to step ``t``.
All helpers accept a scalar ``t`` with an unbatched latent of shape ``(D,)`` or
an integer array ``t`` of shape ``(N,)`` with latents of shape ``(N, D)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError

VARIANCE_MODES = ("posterior", "beta")
SCHEDULE_KINDS = ("linear", "squaredcos")


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    variance_mode: str = "posterior"
    beta_start: float = 0.0
    beta_end: float = 0.0
    kind: str = "linear"

    def __post_init__(self):
        if self.variance_mode not in VARIANCE_MODES:
            raise ParameterError(f"variance_mode must be one of {VARIANCE_MODES}")
        for arr in (self.beta, self.alpha, self.alpha_bar, self.posterior_var):
            arr.setflags(write=False)

    @property
    def sigma(self) -> np.ndarray:
        """Sampling standard deviation per step under ``variance_mode``."""
        var = self.posterior_var if self.variance_mode == "posterior" else self.beta
        return np.sqrt(var)

    def to_dict(self) -> dict:
        return {
            "num_steps": self.num_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "kind": self.kind,
            "variance_mode": self.variance_mode,
        }

    def fingerprint(self) -> str:
        """Content hash of the schedule, stored in checkpoints."""
        h = hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.beta, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def _index(self, t):
        t = np.asarray(t)
        if np.any(t < 1):
            raise ContractError("timestep must be >= 1 (t=0 is the clean sample)")
        if np.any(t > self.num_steps):
            raise ContractError(f"timestep must be <= T={self.num_steps}")
        return t - 1


def _cosine_betas(T: int, max_beta: float, s: float = 0.008) -> np.ndarray:
    def f(u):
        return math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2

    return np.array([min(1 - f(i + 1) / f(i), max_beta) for i in range(T)])


def build_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
    variance_mode: str = "posterior",
) -> NoiseSchedule:
    """Precompute a ``T``-step DDPM chain.

    ``linear`` spaces betas evenly between the endpoints. ``squaredcos`` uses
    the cosine alpha-bar curve with betas capped at ``beta_end``.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    if not (0 < beta_start <= beta_end < 1):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "squaredcos":
        beta = _cosine_betas(int(T), beta_end)
    else:
        raise ParameterError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    # step 1 would otherwise have zero variance
    posterior_var[0] = beta[0]
    return NoiseSchedule(
        num_steps=int(T),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_var=posterior_var,
        variance_mode=variance_mode,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        kind=kind,
    )


def schedule_from_dict(d: dict) -> NoiseSchedule:
    return build_schedule(
        int(d["num_steps"]),
        float(d["beta_start"]),
        float(d["beta_end"]),
        d.get("kind", "linear"),
        d.get("variance_mode", "posterior"),
    )


def _col(v, x):
    """Broadcast a per-sample coefficient against latents ``x``."""
    v = np.asarray(v)
    return v[..., None] if v.ndim and np.ndim(x) > v.ndim else v


def forward_noise(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Noisy latent ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ParameterError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    ab = sched.alpha_bar[sched._index(t)]
    return _col(np.sqrt(ab), x0) * x0 + _col(np.sqrt(1.0 - ab), x0) * eps


def posterior_step(pred_eps, t, x_t, sched: NoiseSchedule):
    """Mean and standard deviation of ``x_{t-1}`` given ``x_t`` and an eps prediction.

    Returns ``(mu, sigma)``; ``sigma`` is a float for scalar ``t`` and an
    ``(N,)`` array for batched ``t``.
    """
    idx = sched._index(t)
    beta = sched.beta[idx]
    coef = beta / np.sqrt(1.0 - sched.alpha_bar[idx])
    x_t = np.asarray(x_t, dtype=np.float64)
    mu = (x_t - _col(coef, x_t) * pred_eps) / _col(np.sqrt(sched.alpha[idx]), x_t)
    sigma = sched.sigma[idx]
    return mu, (float(sigma) if np.ndim(sigma) == 0 else sigma)


def mean_eps_gain(t, sched: NoiseSchedule):
    """``d mu / d pred_eps`` at step ``t`` (a negative scalar per step)."""
    idx = sched._index(t)
    return -sched.beta[idx] / (
        np.sqrt(1.0 - sched.alpha_bar[idx]) * np.sqrt(sched.alpha[idx])
    )


def sample_step(mu, sigma, xi) -> np.ndarray:
    """Draw ``mu + sigma * xi`` with externally supplied standard-normal ``xi``."""
    mu = np.asarray(mu, dtype=np.float64)
    return mu + _col(sigma, mu) * xi
