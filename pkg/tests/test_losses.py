import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from defectgen.losses import (attention_ratio, average_attention, clamp_ratio, defect_loss, mask_loss, recon_loss,
                              resize_mask, total_loss)


def brute_mse(a, b):
    a, b = a.double().flatten().tolist(), b.double().flatten().tolist()
    return sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)


def test_recon_loss_cases():
    e = torch.randn(2, 3, 4, 4)
    assert recon_loss(e, e).item() == 0
    assert recon_loss(e + 1, e).item() == pytest.approx(1.0)
    a = torch.randn(2, 3, 5, 5)
    assert recon_loss(a, e[:, :, :1, :1].expand(2, 3, 5, 5).clone() * 0 + torch.randn(2, 3, 5, 5)).item() >= 0
    x, y = torch.randn(3, 7), torch.randn(3, 7)
    assert recon_loss(x, y).item() == pytest.approx(brute_mse(x, y), abs=1e-6)
    with pytest.raises(ValueError):
        recon_loss(x, y.T)


def test_mask_loss_conventions():
    z, o = torch.zeros(4), torch.ones(4)
    assert mask_loss(z, z).item() == 0
    assert mask_loss(z, o, reduction="sum").item() == 4.0
    assert mask_loss(z, o).item() == 1.0
    x, y = torch.randn(1, 6, 6), torch.randn(1, 6, 6)
    assert mask_loss(x, y).item() == pytest.approx(brute_mse(x, y), abs=1e-6)


def test_average_attention_cases():
    m = torch.softmax(torch.randn(4, 16, 4), dim=-1)
    out = average_attention([m, m, m], [3])
    torch.testing.assert_close(out, m[..., 3].mean(0).reshape(4, 4))
    a, b = torch.full((2, 9, 4), 0.2), torch.full((2, 9, 4), 0.6)
    torch.testing.assert_close(average_attention([a, b], [1, 2]), torch.full((3, 3), 0.4))


def test_average_attention_brute_force():
    gen = torch.Generator().manual_seed(0)
    maps = [torch.softmax(torch.randn(3, 16, 5, generator=gen, dtype=torch.float64), -1) for _ in range(2)]
    idx = [3, 4]
    out = average_attention(maps, idx)
    expect = np.zeros(16)
    for q in range(16):
        acc = 0.0
        for m, h, k in itertools.product(range(2), range(3), idx):
            acc += maps[m][h, q, k].item()
        expect[q] = acc / (2 * 3 * len(idx))
    np.testing.assert_allclose(out.numpy().ravel(), expect, atol=1e-6)
    batched = average_attention([m[None] for m in maps], idx)
    torch.testing.assert_close(batched[0], out)


def test_average_attention_errors():
    with pytest.raises(ValueError):
        average_attention([], [0])
    with pytest.raises(IndexError):
        average_attention([torch.rand(1, 4, 4)], [4])


def test_attention_ratio_cases():
    mp = torch.full((5, 5), 1 / 25)
    mask = torch.zeros(5, 5)
    mask[0] = 1  # 1/5 of pixels
    assert attention_ratio(mp, mask, 1e-9).item() == pytest.approx(4.0, rel=1e-6)
    assert attention_ratio(mp, torch.ones(5, 5), 1e-3).item() == 0
    assert attention_ratio(mp, torch.zeros(5, 5), 1e-3).item() == pytest.approx(1000.0, rel=1e-5)
    with pytest.raises(ValueError):
        attention_ratio(mp, torch.zeros(4, 4))


def test_attention_ratio_scale_invariant_without_alpha():
    mp = torch.rand(6, 6, dtype=torch.float64)
    mask = (torch.rand(6, 6) > 0.7).double()
    mask[0, 0] = 1
    base = attention_ratio(mp, mask, 0.0)
    for c in (0.1, 3.0, 250.0):
        assert attention_ratio(c * mp, mask, 0.0).item() == pytest.approx(base.item(), rel=1e-12)


@pytest.mark.parametrize("rat,expected", [(10, 8), (5, 5), (1, 2), (8, 8), (2, 2)])
def test_clamp_branches(rat, expected):
    assert clamp_ratio(rat) == expected


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100))
def test_clamp_properties(a, b):
    ra, rb = clamp_ratio(a), clamp_ratio(b)
    assert 2 <= ra <= 8
    if 2 < a < 8:
        assert ra == a
    if a <= b:
        assert ra <= rb


def test_defect_loss_cases():
    e, h = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    assert defect_loss(h, e, torch.zeros(2, 1, 4, 4), 5.0).item() == 0
    assert defect_loss(e, e, torch.ones(2, 1, 4, 4), 5.0).item() == 0
    mask = (torch.rand(2, 1, 4, 4) > 0.5).float()
    expect = 3.0 * brute_mse(mask * h, mask * e)
    assert defect_loss(h, e, mask, 3.0).item() == pytest.approx(expect, abs=1e-6)


def test_total_loss():
    assert total_loss(1.0, 0.5, 2.0, 0.2) == pytest.approx(1.9)
    assert total_loss(1.0, 0.5, 2.0, 0.0) == 1.5
    assert total_loss(0.0, 0.0, 0.0) == 0


def test_resize_mask_area_threshold():
    m = torch.zeros(1, 8, 8)
    m[0, :2, :2] = 1  # one full 2x2 cell
    m[0, 4, 4] = 1  # a quarter of a cell: dropped
    out = resize_mask(m, 4)
    assert out[0, 0, 0] == 1 and out.sum() == 1
