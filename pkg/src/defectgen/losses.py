"""Noise reconstruction, mask prediction and attention-weighted defect losses.

Squared norms use the mean over elements by default (``reduction="mean"``); ``"sum"`` gives the
plain squared L2 norm.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

R_MIN, R_MAX = 2.0, 8.0


@dataclass
class LossBreakdown:
    recon: float
    defect: float
    mask: float
    total: float
    ratio_R: float  # mean R over samples that carried a defect term; nan if none did

    def as_dict(self) -> dict:
        return asdict(self)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _reduce(sq: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return sq.mean()
    if reduction == "sum":
        return sq.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def recon_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    _check_shapes(eps_hat, eps)
    return ((eps_hat - eps) ** 2).mean()


def mask_loss(mask_feature: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    _check_shapes(mask_feature, target)
    return _reduce((mask_feature - target) ** 2, reduction)


def average_attention(attn_maps: Sequence[torch.Tensor], token_indices: Sequence[int]) -> torch.Tensor:
    """Mean attention on the selected prompt tokens over tokens, heads and blocks.

    Maps are (heads, H*W, l) or batched (B, heads, H*W, l); the result is (H, W) or (B, H, W).
    """
    if len(attn_maps) == 0:
        raise ValueError("no attention maps")
    l = attn_maps[0].shape[-1]
    idx = list(token_indices)
    if not idx or min(idx) < -l or max(idx) >= l:
        raise IndexError(f"token indices {idx} out of range for prompt length {l}")
    stacked = torch.stack(list(attn_maps))  # (M, [B,] heads, HW, l)
    avg = stacked[..., idx].mean(dim=-1).mean(dim=-2).mean(dim=0)  # tokens, heads, blocks
    side = int(round(avg.shape[-1] ** 0.5))
    if side * side != avg.shape[-1]:
        raise ValueError(f"{avg.shape[-1]} query positions do not form a square grid")
    return avg.reshape(*avg.shape[:-1], side, side)


def attention_ratio(attn: torch.Tensor, mask: torch.Tensor, alpha: float = 1e-3) -> torch.Tensor:
    """Background-to-defect attention mass ratio, per map over the last two dims."""
    _check_shapes(attn, mask)
    mask = mask.to(attn.dtype)
    outside = ((1 - mask) * attn).sum(dim=(-2, -1))
    inside = (mask * attn).sum(dim=(-2, -1))
    return outside / (inside + alpha)


def clamp_ratio(rat):
    """Clamp to [2, 8]; works on floats and tensors."""
    if torch.is_tensor(rat):
        return rat.clamp(R_MIN, R_MAX)
    return min(max(float(rat), R_MIN), R_MAX)


def defect_loss(eps_hat: torch.Tensor, eps: torch.Tensor, mask: torch.Tensor, R, reduction: str = "mean"):
    """``R * ||mask*eps_hat - mask*eps||^2``. ``mask`` broadcasts over channels."""
    _check_shapes(eps_hat, eps)
    return R * _reduce((mask * eps_hat - mask * eps) ** 2, reduction)


def total_loss(recon, defect, mask, lam: float = 0.2):
    return recon + defect + lam * mask


def resize_mask(mask: torch.Tensor, size: int) -> torch.Tensor:
    """Area-downsample a (B, H, W) binary mask and re-binarize at 0.5."""
    if mask.shape[-1] == size:
        return mask.to(torch.float64 if mask.dtype == torch.float64 else torch.float32)
    pooled = F.interpolate(mask[:, None].float(), size=(size, size), mode="area")[:, 0]
    return (pooled >= 0.5).to(pooled.dtype)
