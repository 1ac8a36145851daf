"""Linear noise schedule, forward noising and ancestral reverse sampling.

Timesteps are 1-based (``t = 1..T``) so that ``alpha_cum[t]`` is the product
of ``alpha[1..t]``; index 0 of every schedule array holds the ``t = 0``
convention (``beta = 0``, ``alpha_cum = 1``). Functions work on numpy arrays
and torch tensors alike; ``t`` may be an int or a per-sample integer tensor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray  # length T + 1, beta[0] = 0
    alpha: np.ndarray
    alpha_cum: np.ndarray  # alpha_cum[0] = 1

    @property
    def T(self):
        return len(self.beta) - 1

    @property
    def posterior_variance(self):
        """beta'[t] = (1 - alpha_cum[t-1]) / (1 - alpha_cum[t]) * beta[t]; beta'[0] = 0."""
        out = np.zeros_like(self.beta)
        out[1:] = (1.0 - self.alpha_cum[:-1]) / (1.0 - self.alpha_cum[1:]) * self.beta[1:]
        return out


def make_schedule(T=DEFAULT_STEPS, beta_start=DEFAULT_BETA_START, beta_end=DEFAULT_BETA_END):
    if T < 2:
        raise ValueError(f"need at least 2 steps, got T={T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T, dtype=np.float64)])
    alpha = 1.0 - beta
    alpha_cum = np.cumprod(alpha)
    return NoiseSchedule(beta, alpha, alpha_cum)


def from_zero_based(t):
    """Map the 0-based step range [0, T-1] onto the internal 1-based index."""
    return t + 1


def _check_t(t, sched):
    lo, hi = (int(t.min()), int(t.max())) if isinstance(t, torch.Tensor) else (int(t), int(t))
    if lo < 1 or hi > sched.T:
        raise ValueError(f"timestep out of range [1, {sched.T}]: {t}")


def _coef(values, t, ref):
    """Schedule entry for ``t``, broadcastable against ``ref``."""
    if isinstance(t, torch.Tensor):
        c = torch.as_tensor(values, dtype=ref.dtype, device=ref.device)[t.long()]
        return c.reshape(-1, *([1] * (ref.dim() - 1)))
    return float(values[int(t)])


def q_sample(z0, t, eps, sched):
    """Closed-form marginal: sqrt(alpha_cum) z0 + sqrt(1 - alpha_cum) eps."""
    _check_t(t, sched)
    if tuple(eps.shape) != tuple(z0.shape):
        raise ValueError("noise shape must match z0")
    return _coef(np.sqrt(sched.alpha_cum), t, z0) * z0 + _coef(np.sqrt(1.0 - sched.alpha_cum), t, z0) * eps


def q_step(z_prev, t, eps, sched):
    """One forward step: sqrt(alpha_t) z_{t-1} + sqrt(1 - alpha_t) eps."""
    _check_t(t, sched)
    return _coef(np.sqrt(sched.alpha), t, z_prev) * z_prev + _coef(np.sqrt(1.0 - sched.alpha), t, z_prev) * eps


def predict_z0(z_t, t, eps_pred, sched):
    """Invert the forward marginal given a noise estimate."""
    _check_t(t, sched)
    return (z_t - _coef(np.sqrt(1.0 - sched.alpha_cum), t, z_t) * eps_pred) / _coef(np.sqrt(sched.alpha_cum), t, z_t)


def p_mean(z_t, t, eps_pred, sched):
    k = np.zeros_like(sched.beta)
    k[1:] = (1.0 - sched.alpha[1:]) / np.sqrt(1.0 - sched.alpha_cum[1:])
    return _coef(1.0 / np.sqrt(sched.alpha), t, z_t) * (z_t - _coef(k, t, z_t) * eps_pred)


def p_step(z_t, t, eps_pred, sched, noise=None):
    """Reverse step z_t -> z_{t-1}; noise is ignored at t = 1."""
    _check_t(t, sched)
    mean = p_mean(z_t, t, eps_pred, sched)
    if noise is None:
        return mean
    std = _coef(np.sqrt(sched.posterior_variance), t, z_t)
    return mean + std * noise


def sample(noise_fn, cond, sched, seed, shape, dtype=torch.float32):
    """Ancestral sampling from z_T ~ N(0, I); deterministic given ``seed``.

    ``noise_fn(z_t, t, cond)`` returns the noise estimate for integer ``t``.
    """
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(shape, generator=gen, dtype=dtype)
    for t in range(sched.T, 0, -1):
        eps = noise_fn(z, t, cond)
        noise = torch.randn(shape, generator=gen, dtype=dtype) if t > 1 else None
        z = p_step(z, t, eps, sched, noise)
    return z
