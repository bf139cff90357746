"""Three-part patch-transformer denoiser (background / defect / fusion block groups)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import TEMPLATE, ConditionTriple, TextEncoder, Vocabulary, encode_conditions
from .maskgen import MaskHead


@dataclass
class TDIAConfig:
    N: int = 2  # background blocks
    M: int = 2  # defect blocks
    K: int = 2  # fusion blocks
    width: int = 64
    heads: int = 4
    patch: int = 4
    image_size: int = 32
    channels: int = 3
    text_width: int = 64
    mask_hidden: int = 32
    fused_prompt_only: bool = False

    def __post_init__(self):
        if min(self.N, self.M, self.K) < 0:
            raise ValueError("block counts must be >= 0")
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def defect_prompt_len(self) -> int:
        # cross-attention sees the fusion prompt (one extra token) in the fused-prompt ablation
        return len(TEMPLATE) + (2 if self.fused_prompt_only else 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DenoiserOutput:
    eps_hat: torch.Tensor
    attn_maps: list = field(default_factory=list)  # M tensors (B, heads, H*W, l)
    mask_feature: torch.Tensor | None = None  # (B, 1, image, image)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def pos_embed_2d(width: int, grid: int) -> torch.Tensor:
    """Fixed sin-cos position table of shape (grid*grid, width)."""
    def one_axis(dim, pos):
        omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
        out = np.einsum("m,d->md", pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    gh, gw = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    half = width // 2
    emb = np.concatenate([one_axis(half, gh.reshape(-1)), one_axis(width - half, gw.reshape(-1))], axis=1)
    return torch.from_numpy(emb)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class TimestepEmbedder(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.width = width
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t):
        return self.mlp(timestep_embedding(t, self.width).to(self.mlp[0].weight.dtype))


class SelfAttention(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x):
        B, L, D = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class CrossAttention(nn.Module):
    """Image queries against prompt keys; returns the output and the softmax map."""

    def __init__(self, width, text_width, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(text_width, width)
        self.v = nn.Linear(text_width, width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, context):
        B, L, D = x.shape
        h, dh = self.heads, D // self.heads
        q = self.q(x).view(B, L, h, dh).transpose(1, 2)
        k = self.k(context).view(B, -1, h, dh).transpose(1, 2)
        v = self.v(context).view(B, -1, h, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)  # (B, h, L, l)
        out = (attn @ v).transpose(1, 2).reshape(B, L, D)
        return self.proj(out), attn


def _mlp(width):
    return nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))


class AdaLNBlock(nn.Module):
    """DiT block modulated by timestep + pooled prompt."""

    def __init__(self, width, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = _mlp(width)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))

    def forward(self, x, c):
        s1, sc1, g1, s2, sc2, g2 = self.modulation(c).chunk(6, dim=-1)
        x = x + g1.unsqueeze(1) * self.attn(modulate(self.norm1(x), s1, sc1))
        return x + g2.unsqueeze(1) * self.mlp(modulate(self.norm2(x), s2, sc2))


class DefectBlock(nn.Module):
    """Timestep-modulated block with a cross-attention sublayer over the defect prompt tokens."""

    def __init__(self, width, text_width, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(width, heads)
        self.norm_x = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.cross = CrossAttention(width, text_width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = _mlp(width)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 9 * width))

    def forward(self, x, c, context):
        s1, sc1, g1, sx, scx, gx, s2, sc2, g2 = self.modulation(c).chunk(9, dim=-1)
        x = x + g1.unsqueeze(1) * self.attn(modulate(self.norm1(x), s1, sc1))
        out, attn = self.cross(modulate(self.norm_x(x), sx, scx), context)
        x = x + gx.unsqueeze(1) * out
        return x + g2.unsqueeze(1) * self.mlp(modulate(self.norm2(x), s2, sc2)), attn


class TDIA(nn.Module):
    def __init__(self, cfg: TDIAConfig):
        super().__init__()
        self.cfg = cfg
        w, p, C = cfg.width, cfg.patch, cfg.channels
        self.patch_embed = nn.Conv2d(C, w, kernel_size=p, stride=p)
        self.register_buffer("pos_embed", pos_embed_2d(w, cfg.grid).float(), persistent=False)
        has_blocks = cfg.N + cfg.M + cfg.K > 0
        self.t_embed = TimestepEmbedder(w) if has_blocks else None
        self.bg_proj = nn.Linear(cfg.text_width, w) if cfg.N else None
        self.fusion_proj = nn.Linear(cfg.text_width, w) if cfg.K else None
        self.background_blocks = nn.ModuleList(AdaLNBlock(w, cfg.heads) for _ in range(cfg.N))
        self.defect_blocks = nn.ModuleList(DefectBlock(w, cfg.text_width, cfg.heads) for _ in range(cfg.M))
        self.fusion_blocks = nn.ModuleList(AdaLNBlock(w, cfg.heads) for _ in range(cfg.K))
        self.final_norm = nn.LayerNorm(w)
        self.final = nn.Linear(w, p * p * C)
        self.mask_head = (MaskHead(cfg.M * cfg.heads * cfg.defect_prompt_len, cfg.grid, cfg.image_size,
                                   hidden=cfg.mask_hidden) if cfg.M else None)

    def unpatchify(self, x):
        B = x.shape[0]
        g, p, C = self.cfg.grid, self.cfg.patch, self.cfg.channels
        x = x.view(B, g, g, p, p, C).permute(0, 5, 1, 3, 2, 4)
        return x.reshape(B, C, g * p, g * p)

    def forward(self, x_t: torch.Tensor, t, cond: ConditionTriple, mask_rows=None) -> DenoiserOutput:
        cfg = self.cfg
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if tuple(x_t.shape[1:]) != expected:
            raise ValueError(f"expected input (B, {expected}), got {tuple(x_t.shape)}")
        B = x_t.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((B,), int(t), dtype=torch.long)
        elif t.dim() == 0:
            t = t.expand(B)

        background, defect_ctx = cond.background, cond.defect
        fusion_pooled = cond.fusion.mean(dim=1)
        if cfg.fused_prompt_only:
            background, defect_ctx = fusion_pooled, cond.fusion

        x = self.patch_embed(x_t).flatten(2).transpose(1, 2) + self.pos_embed.to(x_t.dtype)
        attn_maps = []
        if self.t_embed is not None:
            temb = self.t_embed(t)
            if cfg.N:
                c = temb + self.bg_proj(background)
                for blk in self.background_blocks:
                    x = blk(x, c)
            for blk in self.defect_blocks:
                x, attn = blk(x, temb, defect_ctx)
                attn_maps.append(attn)
            if cfg.K:
                c = temb + self.fusion_proj(fusion_pooled)
                for blk in self.fusion_blocks:
                    x = blk(x, c)
        eps_hat = self.unpatchify(self.final(self.final_norm(x)))
        mask_feature = None
        if self.mask_head is not None:
            maps = attn_maps if mask_rows is None else [a[mask_rows] for a in attn_maps]
            if maps[0].shape[0]:
                mask_feature = self.mask_head(maps)
        return DenoiserOutput(eps_hat, attn_maps, mask_feature)


def parameter_count(cfg: TDIAConfig) -> int:
    """Closed-form trainable parameter total of :class:`TDIA` for ``cfg``."""
    w, tw, p, C = cfg.width, cfg.text_width, cfg.patch, cfg.channels
    total = C * p * p * w + w  # patch embedding
    total += 2 * w + w * p * p * C + p * p * C  # final norm + projection
    if cfg.N + cfg.M + cfg.K:
        total += 2 * w * w + 2 * w
    if cfg.N:
        total += tw * w + w
    if cfg.K:
        total += tw * w + w
    adaln = 18 * w * w + 15 * w
    defect = 21 * w * w + 18 * w + 2 * w * w + 2 * tw * w + 4 * w
    total += (cfg.N + cfg.K) * adaln + cfg.M * defect
    if cfg.M:
        cin, hid = cfg.M * cfg.heads * cfg.defect_prompt_len, cfg.mask_hidden
        total += cin * hid * 9 + hid + hid * 9 + 1
    return total


class IdentityCodec:
    """Pixel-space stand-in for the image autoencoder."""

    def encode(self, x):
        return x

    def decode(self, z):
        return z


class DefectDenoiser(nn.Module):
    """Text encoder + TDIA behind a label-level call: ``model(x_t, t, defects, products)``."""

    def __init__(self, cfg: TDIAConfig, vocab: Vocabulary):
        super().__init__()
        self.cfg = cfg
        self.encoder = TextEncoder(vocab, cfg.text_width)
        self.tdia = TDIA(cfg)
        self.codec = IdentityCodec()

    @property
    def vocab(self) -> Vocabulary:
        return self.encoder.vocab

    def forward(self, x_t, t, defects: Sequence[str], products: Sequence[str],
                mask_rows=None) -> DenoiserOutput:
        if len(defects) != x_t.shape[0] or len(products) != x_t.shape[0]:
            raise ValueError("one (defect, product) condition per batch element required")
        cond = encode_conditions(self.encoder, defects, products)
        if cond.background.dtype != x_t.dtype:
            cond = ConditionTriple(cond.background.to(x_t.dtype), cond.defect.to(x_t.dtype), cond.fusion.to(x_t.dtype))
        return self.tdia(x_t, t, cond, mask_rows)
