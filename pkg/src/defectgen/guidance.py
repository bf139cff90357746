"""Two-scale ("double-free") guided denoising, zero-shot transfer and the sampling loop."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .conditioning import GOOD, NULL
from .maskgen import accumulate, decode_mask
from .schedule import NoiseSchedule, ddpm_reverse_step, q_sample

# (x_t, t, defects, products, mask_rows=None) -> DenoiserOutput. With ``mask_rows`` (a slice) the mask
# feature covers only those batch rows, and is None when the slice is empty.
Denoiser = Callable


@dataclass
class GuidanceConfig:
    w_p: float = 1.0
    w_d: float = 1.0
    steps: int | None = None  # defaults to the schedule length
    mask_window: int | None = None  # defaults to min(100, ceil(0.1 * steps))

    def resolve(self, sched: NoiseSchedule) -> "GuidanceConfig":
        steps = sched.T if self.steps is None else self.steps
        if not 1 <= steps <= sched.T:
            raise ValueError(f"steps {steps} outside [1, {sched.T}]")
        window = min(100, math.ceil(0.1 * steps)) if self.mask_window is None else self.mask_window
        if not 1 <= window <= steps:
            raise ValueError(f"mask_window {window} outside [1, {steps}]")
        if self.w_p < 0 or self.w_d < 0:
            raise ValueError("guidance scales must be >= 0")
        return GuidanceConfig(self.w_p, self.w_d, steps, window)


def _labels(value, n) -> list[str]:
    if isinstance(value, str):
        return [value] * n
    value = list(value)
    if len(value) != n:
        raise ValueError(f"expected {n} labels, got {len(value)}")
    return value


def guided_output(denoiser: Denoiser, x_t, t, defect_cond, product_cond, g: GuidanceConfig, with_mask: bool = True):
    """Guided noise plus the defect-conditional pass output (which carries the mask feature).

    One batched call evaluates the three condition pairs (GOOD, NULL), (GOOD, product), (defect, NULL).
    """
    n = x_t.shape[0]
    defects, products = _labels(defect_cond, n), _labels(product_cond, n)
    out = denoiser(torch.cat([x_t, x_t, x_t]), t,
                   [GOOD] * n + [GOOD] * n + defects,
                   [NULL] * n + products + [NULL] * n,
                   mask_rows=slice(2 * n, 3 * n) if with_mask else slice(0, 0))
    uncond, prod, defect = out.eps_hat.split(n)
    eps = uncond + g.w_p * (prod - uncond) + g.w_d * (defect - uncond)
    return eps, out.mask_feature


def double_free_eps(denoiser: Denoiser, x_t, t, defect_cond, product_cond, g: GuidanceConfig) -> torch.Tensor:
    return guided_output(denoiser, x_t, t, defect_cond, product_cond, g, with_mask=False)[0]


def zero_shot_eps(denoiser: Denoiser, x_t, t, source_defect, target_product, g: GuidanceConfig) -> torch.Tensor:
    """Apply a defect direction learned on other products to ``target_product``'s background.

    The arithmetic is the same as :func:`double_free_eps`; only the training provenance of the
    (defect, product) pair differs.
    """
    return guided_output(denoiser, x_t, t, source_defect, target_product, g, with_mask=False)[0]


def defect_direction(denoiser: Denoiser, x_t, t, defect_cond) -> torch.Tensor:
    """eps(x_t, t, defect, NULL) - eps(x_t, t, GOOD, NULL)."""
    n = x_t.shape[0]
    out = denoiser(torch.cat([x_t, x_t]), t, [GOOD] * n + _labels(defect_cond, n), [NULL] * (2 * n),
                    mask_rows=slice(0, 0))
    uncond, defect = out.eps_hat.split(n)
    return defect - uncond


@dataclass
class SampleResult:
    images: torch.Tensor  # (n, C, H, W) in [0, 1]
    gray_masks: np.ndarray  # (n, H, W) in [0, 255]
    step_masks: list = field(default_factory=list, repr=False)  # decoded masks inside the window


@torch.no_grad()
def sample(denoiser: Denoiser, defect_cond, product_cond, g: GuidanceConfig, sched: NoiseSchedule,
           seeds: Sequence[int] = (0,), shape: tuple | None = None) -> SampleResult:
    """Ancestral sampling with guided noise; one independent generator per seed.

    The chain starts at timestep ``steps - 1``. Decoded masks of the final ``mask_window`` steps are
    averaged into the returned gray masks.
    """
    g = g.resolve(sched)
    if shape is None:
        cfg = denoiser.cfg
        shape = (cfg.channels, cfg.image_size, cfg.image_size)
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    x = torch.stack([torch.randn(shape, generator=gen) for gen in gens])
    n = len(gens)
    defects, products = _labels(defect_cond, n), _labels(product_cond, n)
    window = deque(maxlen=g.mask_window)
    for t in range(g.steps - 1, -1, -1):
        eps, mask_feature = guided_output(denoiser, x, t, defects, products, g)
        if mask_feature is not None:
            window.append(decode_mask(mask_feature))
        noise = torch.stack([torch.randn(shape, generator=gen) for gen in gens]) if t > 0 else None
        x = ddpm_reverse_step(x, eps, t, sched, noise=noise)
    images = ((x.clamp(-1, 1) + 1) / 2).float()
    if window:
        gray = accumulate(list(window), len(window), normalize=False)
    else:
        gray = np.zeros((n, shape[-2], shape[-1]))
    return SampleResult(images, gray, list(window))


@torch.no_grad()
def predict_mask(denoiser: Denoiser, x0: torch.Tensor, defects, window: int, sched: NoiseSchedule,
                 seed: int = 0, products=NULL) -> np.ndarray:
    """Teacher-forced mask for known images: noise ``x0`` (in [-1, 1]) to each of the last ``window``
    timesteps, run the defect-conditional pass and average the decoded masks."""
    n = x0.shape[0]
    gen = torch.Generator().manual_seed(seed)
    masks = []
    for t in range(window - 1, -1, -1):
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        out = denoiser(q_sample(x0, t, eps, sched), t, _labels(defects, n), _labels(products, n))
        masks.append(decode_mask(out.mask_feature))
    return accumulate(masks, window, normalize=False)
