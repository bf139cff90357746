"""Proxy quality / diversity metrics and the downstream segmentation harness.

The feature extractor is a frozen, seeded random conv net; absolute values are proxies and are not
comparable to Inception-based FID or LPIPS.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import average_precision_score, roc_auc_score
from torch import nn

from .data import DefectSample

FEATURE_DIM = 64


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError("need at least 2 feature rows")
        return cls(feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False)), feats.shape[0])


@dataclass
class SegMetrics:
    miou: float
    f1: float
    map: float
    auroc: float

    def as_dict(self):
        return asdict(self)


def _feature_net(seed: int, channels: int, dim: int) -> nn.Module:
    gen = torch.Generator().manual_seed(seed)
    layers = [nn.Conv2d(channels, 32, 3, stride=2, padding=1), nn.ReLU(),
              nn.Conv2d(32, dim, 3, stride=2, padding=1), nn.ReLU()]
    net = nn.Sequential(*layers).double()
    with torch.no_grad():
        for m in net:
            if isinstance(m, nn.Conv2d):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=torch.float64) * (2 / fan_in) ** 0.5)
                m.bias.copy_(torch.randn(m.bias.shape, generator=gen, dtype=torch.float64) * 0.1)
    return net.eval()


@torch.no_grad()
def extract_features(images, extractor_seed: int = 0, dim: int = FEATURE_DIM) -> np.ndarray:
    """(n, C, H, W) images in [0, 1] -> (n, dim) globally pooled random-conv features."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float64)
    if x.ndim != 4 or x.shape[0] == 0:
        raise ValueError("expected a nonempty (n, C, H, W) image batch")
    net = _feature_net(extractor_seed, x.shape[1], dim)
    return net(x * 2 - 1).mean(dim=(2, 3)).numpy()


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats, psd_tol: float = 1e-8) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    tr((S_a S_b)^(1/2)) is evaluated as tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)), which shares its
    eigenvalues, via symmetric eigendecompositions with negative eigenvalues clipped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dims differ: {a.mean.shape} vs {b.mean.shape}")
    for s in (a, b):
        w = np.linalg.eigvalsh((s.cov + s.cov.T) / 2)
        if w.min() < -psd_tol * max(1.0, abs(w).max()):
            raise ValueError(f"covariance not PSD (min eigenvalue {w.min():.3g})")
    root_a = _sqrtm_psd(a.cov)
    cross = _sqrtm_psd(root_a @ b.cov @ root_a)
    d = float(((a.mean - b.mean) ** 2).sum() + np.trace(a.cov) + np.trace(b.cov) - 2 * np.trace(cross))
    return max(d, 0.0)


def pairwise_diversity(images, extractor_seed: int = 0) -> float:
    """Mean L2 feature distance over unordered pairs, divided by the feature dimension."""
    if len(images) < 2:
        raise ValueError("need at least 2 images")
    f = extract_features(images, extractor_seed)
    dists = [np.linalg.norm(f[i] - f[j]) for i, j in combinations(range(len(f)), 2)]
    return float(np.mean(dists) / f.shape[1])


def mask_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred) > 0, np.asarray(truth) > 0
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


# ---------------------------------------------------------------- downstream segmentation

def _conv_block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(), nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU())


class Segmenter(nn.Module):
    """Three-level encoder-decoder emitting per-pixel defect logits."""

    def __init__(self, channels: int = 3, width: int = 16):
        super().__init__()
        w = width
        self.enc1, self.enc2, self.enc3 = _conv_block(channels, w), _conv_block(w, 2 * w), _conv_block(2 * w, 4 * w)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2)
        self.dec2 = _conv_block(4 * w, 2 * w)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = _conv_block(2 * w, w)
        self.out = nn.Conv2d(w, 1, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(e3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.out(d1)[:, 0]


def _stack(samples: Sequence[DefectSample]):
    x = torch.from_numpy(np.stack([s.image for s in samples])).float()
    y = torch.from_numpy(np.stack([s.mask for s in samples])).float()
    return x, y


def train_segmenter(samples: Sequence[DefectSample], steps: int = 2000, seed: int = 0, batch: int = 8,
                    lr: float = 1e-3) -> Segmenter:
    torch.manual_seed(seed)
    C = samples[0].image.shape[0]
    net = Segmenter(C)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    x, y = _stack(samples)
    pos = float(y.mean())
    pos_weight = torch.tensor((1 - pos) / pos if pos > 0 else 1.0).clamp(max=20.0)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = torch.from_numpy(rng.choice(len(samples), size=batch, replace=len(samples) < batch))
        loss = F.binary_cross_entropy_with_logits(net(x[idx]), y[idx], pos_weight=pos_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return net.eval()


@torch.no_grad()
def segmentation_metrics(net: Segmenter, test_set: Sequence[DefectSample]) -> SegMetrics:
    x, y = _stack(test_set)
    scores = torch.sigmoid(net(x)).numpy()
    truth = y.numpy() > 0.5
    pred = scores >= 0.5
    miou = float(np.mean([mask_iou(p, t) for p, t in zip(pred, truth)]))
    tp = np.logical_and(pred, truth).sum()
    denom = pred.sum() + truth.sum()
    f1 = float(2 * tp / denom) if denom else 1.0
    flat_t, flat_s = truth.ravel(), scores.ravel()
    if flat_t.all() or not flat_t.any():
        ap, auc = float(flat_t.all()), 0.5
    else:
        ap, auc = float(average_precision_score(flat_t, flat_s)), float(roc_auc_score(flat_t, flat_s))
    return SegMetrics(miou, f1, ap, auc)


def run_downstream(train_real: Sequence[DefectSample], train_generated: Sequence[DefectSample],
                   test_set: Sequence[DefectSample], steps: int = 2000, seed: int = 0,
                   ratio: float = 2.0) -> tuple[SegMetrics, SegMetrics]:
    """Train on real only, then on real plus up to ``ratio * len(real)`` generated samples."""
    if not train_real or not test_set:
        raise ValueError("train_real and test_set must be nonempty")
    base = segmentation_metrics(train_segmenter(train_real, steps, seed), test_set)
    extra = list(train_generated)
    limit = int(round(ratio * len(train_real)))
    if len(extra) > limit:
        pick = np.random.default_rng(seed).choice(len(extra), size=limit, replace=False)
        extra = [extra[i] for i in sorted(pick)]
    aug = segmentation_metrics(train_segmenter(list(train_real) + extra, steps, seed), test_set)
    return base, aug
