"""Noise schedule and the closed-form DDPM forward / reverse steps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def make_linear_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(betas, alphas, alpha_bars)


def _check_t(t, sched: NoiseSchedule):
    if torch.is_tensor(t):
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= sched.T):
            raise IndexError(f"timestep out of range [0, {sched.T})")
    elif not 0 <= t < sched.T:
        raise IndexError(f"timestep {t} out of range [0, {sched.T})")


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    # broadcast a per-timestep scalar against a (B, ...) batch
    if torch.is_tensor(t):
        c = torch.tensor(values, dtype=like.dtype)[t.long()]
        return c.view(-1, *([1] * (like.dim() - 1)))
    return torch.tensor(float(values[t]), dtype=like.dtype)


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Noise ``x0`` straight to step ``t``. ``t`` is an int or a (B,) tensor."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    _check_t(t, sched)
    ab = _coef(sched.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def ddpm_reverse_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule,
                      generator: torch.Generator | None = None, noise: torch.Tensor | None = None) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1} with variance beta_t; no noise at t == 0.

    ``noise`` overrides the draw from ``generator`` (used for per-sample generators in a batch).
    """
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: x_t {tuple(x_t.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    _check_t(t, sched)
    beta = float(sched.betas[t])
    mean = (x_t - beta / np.sqrt(1.0 - sched.alpha_bars[t]) * eps_hat) / np.sqrt(sched.alphas[t])
    if t == 0:
        return mean
    z = noise if noise is not None else torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + np.sqrt(beta) * z
