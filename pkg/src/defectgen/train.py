"""Training loop: condition dropout, noising, denoiser forward and the combined objective."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint
from .conditioning import DEFECT_TOKEN_INDEX, GOOD, Vocabulary, double_free_dropout
from .data import DefectSample
from .losses import (LossBreakdown, attention_ratio, average_attention, clamp_ratio, recon_loss, resize_mask,
                     total_loss)
from .model import DefectDenoiser, TDIAConfig
from .schedule import NoiseSchedule, make_linear_schedule, q_sample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 500
    batch: int = 8
    lr: float = 1e-3
    seed: int = 0
    lambda_mask: float = 0.2
    p1: float = 0.2
    p2: float = 0.2
    alpha: float = 1e-3
    fixed_R: float | None = None  # ablation: constant defect weight instead of the attention ratio
    fused_prompt_only: bool = False  # ablation: fusion prompt feeds all three parts
    no_fusion: bool = False  # ablation: K = 0
    mask_loss_on_good: bool = True  # GOOD-conditioned samples regress an empty mask
    grad_clip: float = 1.0
    hflip: bool = False
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    N: int = 2
    M: int = 2
    K: int = 2
    width: int = 64
    heads: int = 4
    patch: int = 4
    checkpoint_every: int = 0

    def __post_init__(self):
        if not (0 <= self.p1 <= 1 and 0 <= self.p2 <= 1):
            raise ValueError("p1 and p2 must lie in [0, 1]")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.fixed_R is not None and not 1 <= self.fixed_R <= 16:
            raise ValueError("fixed_R must lie in [1, 16]")
        if self.M == 0 and self.fixed_R is None:
            raise ValueError("M = 0 leaves no attention maps; set fixed_R")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")

    def model_config(self, image_size: int, channels: int = 3) -> TDIAConfig:
        return TDIAConfig(N=self.N, M=self.M, K=0 if self.no_fusion else self.K, width=self.width,
                          heads=self.heads, patch=self.patch, image_size=image_size, channels=channels,
                          text_width=self.width, fused_prompt_only=self.fused_prompt_only)


@dataclass
class TrainState:
    model: DefectDenoiser
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    sched: NoiseSchedule
    step: int = 0
    trained_combos: list = None
    history: list = None


def compute_losses(model: DefectDenoiser, x0, masks, sample_defects: Sequence[str], cond_defects: Sequence[str],
                   cond_products: Sequence[str], t, eps, sched: NoiseSchedule, cfg: TrainConfig, R=None):
    """Objective for one batch with all random draws supplied.

    ``masks`` is (B, H, W) in {0, 1}. ``R`` overrides the per-sample defect weight (held constant
    w.r.t. gradients either way). Returns (total, parts, R) with ``parts`` holding tensors.
    """
    B = x0.shape[0]
    out = model(q_sample(x0, t, eps, sched), t, cond_defects, cond_products)
    recon = recon_loss(out.eps_hat, eps)

    cond_good = torch.tensor([d == GOOD for d in cond_defects])
    defect_on = torch.tensor([s != GOOD for s in sample_defects]) & ~cond_good
    mask_on = defect_on | cond_good if cfg.mask_loss_on_good else defect_on
    masks = masks.to(x0.dtype)

    if R is None:
        if cfg.fixed_R is not None:
            R = torch.full((B,), float(cfg.fixed_R), dtype=x0.dtype)
        else:
            attn = average_attention([a.detach() for a in out.attn_maps], [DEFECT_TOKEN_INDEX])
            small = resize_mask(masks, attn.shape[-1]).to(attn.dtype)
            R = clamp_ratio(attention_ratio(attn, small, cfg.alpha))
    R = torch.as_tensor(R, dtype=x0.dtype).detach().expand(B)

    m4 = masks[:, None]
    per_defect = ((m4 * out.eps_hat - m4 * eps) ** 2).flatten(1).mean(dim=1)
    defect = (defect_on.to(x0.dtype) * R * per_defect).sum() / B
    if out.mask_feature is not None:
        target = (masks * defect_on.to(x0.dtype)[:, None, None])[:, None]
        per_mask = ((out.mask_feature - target) ** 2).flatten(1).mean(dim=1)
        mask = (mask_on.to(x0.dtype) * per_mask).sum() / B
    else:
        mask = torch.zeros((), dtype=x0.dtype)
    total = total_loss(recon, defect, mask, cfg.lambda_mask)
    return total, {"recon": recon, "defect": defect, "mask": mask, "defect_on": defect_on}, R


def draw_batch_inputs(batch: Sequence[DefectSample], cfg: TrainConfig, sched: NoiseSchedule,
                      rng: np.random.Generator, generator: torch.Generator, dtype=torch.float32):
    """All random draws of one training step, in a fixed order."""
    conds = [double_free_dropout(s.defect, s.product, cfg.p1, cfg.p2, rng) for s in batch]
    t = torch.from_numpy(rng.integers(0, sched.T, size=len(batch)))
    images = np.stack([s.image for s in batch])
    masks = np.stack([s.mask for s in batch])
    if cfg.hflip:
        flip = rng.random(len(batch)) < 0.5
        images[flip] = images[flip][..., ::-1]
        masks[flip] = masks[flip][..., ::-1]
    x0 = torch.from_numpy(np.ascontiguousarray(images)).to(dtype) * 2 - 1
    eps = torch.randn(x0.shape, generator=generator, dtype=dtype)
    return x0, torch.from_numpy(np.ascontiguousarray(masks)).to(dtype), conds, t, eps


def train_step(batch: Sequence[DefectSample], model: DefectDenoiser, sched: NoiseSchedule, cfg: TrainConfig,
               optimizer: torch.optim.Optimizer, rng: np.random.Generator,
               generator: torch.Generator) -> LossBreakdown:
    if len(batch) == 0:
        raise ValueError("empty batch")
    model.train()
    x0, masks, conds, t, eps = draw_batch_inputs(batch, cfg, sched, rng, generator)
    total, parts, R = compute_losses(model, x0, masks, [s.defect for s in batch], [c.defect for c in conds],
                                     [c.product for c in conds], t, eps, sched, cfg)
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite loss: recon={float(parts['recon'])} defect={float(parts['defect'])} "
                                 f"mask={float(parts['mask'])}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    on = parts["defect_on"]
    ratio = float(R[on].mean()) if bool(on.any()) else math.nan
    return LossBreakdown(parts["recon"].item(), parts["defect"].item(), parts["mask"].item(), total.item(), ratio)


def step_generators(seed: int, step: int) -> tuple[np.random.Generator, torch.Generator]:
    """Per-step random sources derived from (seed, step) so a resumed run replays exactly."""
    rng = np.random.default_rng([seed, step])
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    return rng, gen


def build_vocab(dataset: Sequence[DefectSample]) -> Vocabulary:
    products = sorted({s.product for s in dataset})
    defects = sorted({s.defect for s in dataset if s.defect != GOOD})
    return Vocabulary(products + defects)


def init_state(dataset: Sequence[DefectSample], cfg: TrainConfig) -> TrainState:
    if not dataset:
        raise ValueError("empty dataset")
    C, H, W = dataset[0].image.shape
    if H != W:
        raise ValueError("images must be square")
    torch.manual_seed(cfg.seed)
    model = DefectDenoiser(cfg.model_config(H, C), build_vocab(dataset))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    combos = sorted({(s.product, s.defect) for s in dataset})
    return TrainState(model, opt, cfg, make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end), 0,
                      [list(c) for c in combos], [])


def fit(dataset: Sequence[DefectSample], cfg: TrainConfig, out_dir=None, state: TrainState | None = None,
        log_path=None, progress: bool = False) -> TrainState:
    """Run ``cfg.steps`` optimizer steps (continuing from ``state`` if given)."""
    if not dataset:
        raise ValueError("empty dataset")
    if not any(s.defect == GOOD for s in dataset):
        log.warning("no 'good' samples in the dataset; unconditional-normal condition pairs are undersampled")
    state = state or init_state(dataset, cfg)
    state.cfg = cfg
    n = len(dataset)
    log_file = open(log_path, "a") if log_path else None
    try:
        while state.step < cfg.steps:
            rng, gen = step_generators(cfg.seed, state.step)
            idx = rng.choice(n, size=cfg.batch, replace=n < cfg.batch)
            lb = train_step([dataset[i] for i in idx], state.model, state.sched, cfg, state.optimizer, rng, gen)
            state.step += 1
            state.history.append(lb)
            if log_file:
                log_file.write(json.dumps({"step": state.step, **lb.as_dict()}) + "\n")
            if progress and state.step % 50 == 0:
                log.info("step %d total %.4f recon %.4f defect %.4f mask %.4f", state.step, lb.total, lb.recon,
                         lb.defect, lb.mask)
            if out_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state, Path(out_dir) / f"checkpoint_{state.step:06d}.ckpt")
    finally:
        if log_file:
            log_file.close()
    state.model.eval()
    return state


def save_checkpoint(state: TrainState, path):
    checkpoint.save(path, {
        "model_config": state.model.cfg.to_dict(),
        "train_config": asdict(state.cfg),
        "vocab": state.model.vocab.tokens,
        "step": state.step,
        "trained_combos": state.trained_combos,
        "params": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
    })


def load_checkpoint(path) -> TrainState:
    meta = checkpoint.load(path)
    names = {f.name for f in fields(TrainConfig)}
    cfg = TrainConfig(**{k: v for k, v in meta["train_config"].items() if k in names})
    vocab = Vocabulary.from_tokens(meta["vocab"])
    model = DefectDenoiser(TDIAConfig(**meta["model_config"]), vocab)
    model.load_state_dict(meta["params"])
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    opt.load_state_dict(meta["optimizer"])
    model.eval()
    return TrainState(model, opt, cfg, make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end), meta["step"],
                      [list(c) for c in meta["trained_combos"]], [])
