"""Mask feature head over cross-attention maps, step averaging and iterative binarization."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

MAX_ITER = 50
TOL = 0.5


class DegenerateMaskError(ValueError):
    """Raised when a gray mask is constant and has no meaningful threshold."""


class MaskHead(nn.Module):
    """Concatenate block attention maps along channels and regress a one-channel mask feature."""

    def __init__(self, in_channels: int, grid: int, out_size: int, hidden: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.grid = grid
        self.out_size = out_size
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1, padding_mode="replicate"),
            nn.GELU(),
            nn.Conv2d(hidden, 1, 3, padding=1, padding_mode="replicate"),
        )

    def forward(self, attn_maps: Sequence[torch.Tensor]) -> torch.Tensor:
        if not attn_maps:
            raise ValueError("mask head needs at least one attention map")
        shapes = {tuple(a.shape) for a in attn_maps}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent attention map shapes: {sorted(shapes)}")
        B, h, L, l = attn_maps[0].shape
        if L != self.grid * self.grid:
            raise ValueError(f"expected {self.grid}x{self.grid} query positions, got {L}")
        x = torch.cat([a.permute(0, 1, 3, 2).reshape(B, h * l, self.grid, self.grid) for a in attn_maps], dim=1)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} map channels, got {x.shape[1]}")
        if self.out_size != self.grid:
            x = F.interpolate(x, size=(self.out_size, self.out_size), mode="bilinear", align_corners=False)
        return self.net(x)


def decode_mask(mask_feature: torch.Tensor) -> np.ndarray:
    """Identity decoder: first channel of the mask feature, clipped to [0, 1] and scaled to 8-bit range."""
    m = mask_feature.detach().double()
    if m.dim() == 4:
        m = m[:, 0]
    return (m.clamp(0.0, 1.0) * 255.0).cpu().numpy()


def accumulate(masks: Sequence[np.ndarray], window: int, normalize: bool = True) -> np.ndarray:
    """Mean of the last ``window`` masks; min-max scaled to [0, 255] when ``normalize``.

    With ``normalize=False`` the masks must already be on the 0-255 scale (see :func:`decode_mask`)
    and the mean is only clipped, which keeps an all-background prediction empty.
    """
    if len(masks) == 0:
        raise ValueError("no masks to accumulate")
    if not 1 <= window <= len(masks):
        raise ValueError(f"window {window} outside [1, {len(masks)}]")
    mean = np.mean(np.stack([np.asarray(m, dtype=np.float64) for m in masks[-window:]]), axis=0)
    if not normalize:
        return np.clip(mean, 0.0, 255.0)
    lo, hi = mean.min(), mean.max()
    if hi - lo <= 0:
        return np.clip(mean, 0.0, 255.0)
    return (mean - lo) / (hi - lo) * 255.0


def iterative_threshold(gray: np.ndarray) -> float:
    """Ridler-Calvard mean-split threshold."""
    g = np.asarray(gray, dtype=np.float64).ravel()
    if g.size == 0 or g.max() == g.min():
        raise DegenerateMaskError("constant image has no threshold")
    t = g.mean()
    for _ in range(MAX_ITER):
        below, above = g[g < t], g[g >= t]
        t_new = 0.5 * (below.mean() + above.mean())
        if abs(t_new - t) < TOL:
            return float(t_new)
        t = t_new
    raise RuntimeError(f"threshold did not converge in {MAX_ITER} iterations")


def binarize(gray: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Map to {0, 255}. ``floor`` is a lower bound on the threshold; constant input gives an empty mask."""
    g = np.asarray(gray, dtype=np.float64)
    try:
        t = max(iterative_threshold(g), floor)
    except DegenerateMaskError:
        return np.zeros(g.shape, dtype=np.uint8)
    return np.where(g >= t, 255, 0).astype(np.uint8)
