import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from umri.errors import ConfigError, ShapeError
from umri.metrics import MetricReport, evaluate, nmse, psnr, ssim, ssim_loss

from gradcheck import check_grads


def ssim_oracle(x, y, data_range, win=7, k1=0.01, k2=0.03):
    """Brute-force SSIM over every valid window with sample covariances."""
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    h, w = x.shape
    vals = []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            a = x[i:i + win, j:j + win].ravel()
            b = y[i:i + win, j:j + win].ravel()
            ma, mb = a.mean(), b.mean()
            va = ((a - ma) ** 2).sum() / (a.size - 1)
            vb = ((b - mb) ** 2).sum() / (b.size - 1)
            cov = ((a - ma) * (b - mb)).sum() / (a.size - 1)
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_identity(rng):
    x = rng.random((16, 16))
    assert ssim(x, x) == 1.0


def test_ssim_constant_closed_form():
    a, b = 0.3, 0.8
    x, y = np.full((12, 12), a), np.full((12, 12), b)
    c1 = (0.01 * b) ** 2
    assert abs(ssim(x, y) - (2 * a * b + c1) / (a * a + b * b + c1)) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_bruteforce_oracle(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((14, 13)), rng.random((14, 13))
    assert abs(ssim(x, y, data_range=1.3) - ssim_oracle(x, y, 1.3)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((10, 10)), rng.standard_normal((10, 10))
    s = ssim(x, y, data_range=2.0)
    assert abs(s - ssim(y, x, data_range=2.0)) < 1e-12
    assert -1.0 <= s <= 1.0


def test_ssim_errors(rng):
    with pytest.raises(ShapeError):
        ssim(rng.random((8, 8)), rng.random((8, 9)))
    with pytest.raises(ConfigError):
        ssim(rng.random((8, 8)), rng.random((8, 8)), data_range=0.0)
    with pytest.raises(ShapeError):
        ssim(rng.random((5, 5)), rng.random((5, 5)))


def test_psnr_cases(rng):
    x = rng.random((8, 8))
    assert psnr(x, x) == 99.0
    assert psnr(x, x, cap=None) == math.inf
    d = 0.05
    assert abs(psnr(x + d, x, max_val=1.0) - 10 * math.log10(1 / d ** 2)) < 1e-9
    assert abs(psnr(x + d / 2, x, max_val=1.0) - psnr(x + d, x, max_val=1.0) - 20 * math.log10(2)) < 1e-9


def test_psnr_monotone_in_mse(rng):
    x = rng.random((8, 8))
    noise = rng.standard_normal((8, 8))
    vals = [psnr(x + s * noise, x, 1.0) for s in np.linspace(0.01, 1, 20)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_nmse_cases(rng):
    t = rng.random((8, 8)) + 0.1
    assert nmse(t, t) == 0.0
    assert nmse(np.zeros_like(t), t) == 1.0
    assert abs(nmse(2 * t, t) - 1.0) < 1e-15
    r = rng.random((8, 8))
    assert abs(nmse(-3 * r, -3 * t) - nmse(r, t)) < 1e-12
    with pytest.raises(ConfigError):
        nmse(t, np.zeros_like(t))


def test_report_aggregates_are_plain_means(rng):
    rep = MetricReport()
    rows = []
    for _ in range(5):
        t = rng.random((12, 12)) + 0.1
        rows.append(rep.add(t + 0.05 * rng.standard_normal((12, 12)), t))
    agg = rep.aggregate()
    assert len(rep) == 5
    for k in ("ssim", "psnr", "nmse"):
        assert abs(agg[k] - np.mean([r[k] for r in rows])) < 1e-12
        assert abs(agg[f"{k}_std"] - np.std([r[k] for r in rows])) < 1e-12


def test_ssim_loss_zero_and_stationary(rng):
    t = torch.from_numpy(rng.random((2, 16, 16)))
    r = t.clone().requires_grad_(True)
    loss = ssim_loss(r, t)
    assert float(loss.detach()) == 0.0
    g, = torch.autograd.grad(loss, [r])
    assert g.abs().max() < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_ssim_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    t = torch.from_numpy(rng.random((1, 16, 16)))
    r = torch.from_numpy(rng.random((1, 16, 16))).requires_grad_(True)
    assert check_grads(lambda: ssim_loss(r, t), {"r": r}, max_coords=64) < 1e-4


def test_evaluate_matches_report_row(rng):
    t = rng.random((10, 10)) + 0.1
    r = t + 0.1 * rng.standard_normal((10, 10))
    assert evaluate(r, t) == MetricReport().add(r, t)
