"""Photometric and planar training losses with analytic gradients, plus metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .gaussians import GaussianCloud, shortest_axis_index

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 100.0
MSE_FLOOR = 1e-10


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.2  # D-SSIM mix
    beta: float = 0.001  # normal loss
    gamma: float = 100.0  # scale loss

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")


def _check_same(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _gauss_kernel():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


_KERNEL = _gauss_kernel()


def _blur(x):
    # separable window over the two image axes, zero padded
    y = correlate1d(x, _KERNEL, axis=0, mode="constant")
    return correlate1d(y, _KERNEL, axis=1, mode="constant")


def _blur_adjoint(x):
    k = _KERNEL[::-1]
    y = correlate1d(x, k, axis=1, mode="constant")
    return correlate1d(y, k, axis=0, mode="constant")


def _ssim_terms(a, b):
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _blur(a), _blur(b)
    saa = _blur(a * a) - mu_a**2
    sbb = _blur(b * b) - mu_b**2
    sab = _blur(a * b) - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + c1
    A2 = 2 * sab + c2
    B1 = mu_a**2 + mu_b**2 + c1
    B2 = saa + sbb + c2
    return mu_a, mu_b, A1, A2, B1, B2


def ssim_map(a, b) -> np.ndarray:
    a, b = _check_same(a, b)
    _, _, A1, A2, B1, B2 = _ssim_terms(a, b)
    return (A1 * A2) / (B1 * B2)


def ssim(a, b) -> float:
    """Mean SSIM over pixels and channels."""
    return float(ssim_map(a, b).mean())


def ssim_with_grad(a, b) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient with respect to ``a``."""
    a, b = _check_same(a, b)
    mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b)
    N = a.size
    S = (A1 * A2) / (B1 * B2)
    # partials of the per-pixel SSIM w.r.t. the blurred statistics
    dA1 = A2 / (B1 * B2)
    dA2 = A1 / (B1 * B2)
    dB1 = -S / B1
    dB2 = -S / B2
    d_mu_a = 2 * mu_b * dA1 + 2 * mu_a * dB1 - 2 * mu_a * dB2 - 2 * mu_b * dA2
    d_aa = dB2
    d_ab = 2 * dA2
    g = _blur_adjoint(d_mu_a / N) + 2 * a * _blur_adjoint(d_aa / N) + b * _blur_adjoint(d_ab / N)
    return float(S.mean()), g


def l1_dssim(rendered, target, lam: float = 0.2) -> tuple[float, np.ndarray]:
    """``(1 - lam) * L1 + lam * (1 - SSIM) / 2`` and its gradient w.r.t. ``rendered``."""
    r, t = _check_same(rendered, target)
    diff = r - t
    N = r.size
    l1 = float(np.abs(diff).mean())
    g = (1.0 - lam) * np.sign(diff) / N
    if lam > 0:
        s, gs = ssim_with_grad(r, t)
        return (1.0 - lam) * l1 + lam * (1.0 - s) / 2.0, g - lam * gs / 2.0
    return l1, g


def normal_loss(rendered, propagated, valid, reduction: str = "mean") -> tuple[float, np.ndarray]:
    """L1 plus angular disagreement between two normal maps over ``valid`` pixels."""
    r, p = _check_same(rendered, propagated)
    q = np.asarray(valid, dtype=bool)
    grad = np.zeros_like(r)
    n = int(q.sum())
    if n == 0:
        return 0.0, grad
    rq, pq = r[q], p[q]
    diff = rq - pq
    dot = np.sum(rq * pq, axis=-1)
    per = np.abs(diff).sum(axis=-1) + np.abs(1.0 - dot)
    scale = 1.0 / n if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    grad[q] = scale * (np.sign(diff) - np.sign(1.0 - dot)[:, None] * pq)
    return float(per.sum() * scale), grad


def scale_loss(cloud: GaussianCloud) -> tuple[float, np.ndarray]:
    """Mean smallest scale; the gradient is w.r.t. ``log_scales``."""
    grad = np.zeros_like(cloud.log_scales)
    n = len(cloud)
    if n == 0:
        return 0.0, grad
    idx = shortest_axis_index(cloud.log_scales)
    rows = np.arange(n)
    smin = np.exp(cloud.log_scales[rows, idx])
    grad[rows, idx] = smin / n
    return float(smin.mean()), grad


def planar_loss(l_normal: float, l_scale: float, beta: float = 0.001, gamma: float = 100.0) -> float:
    return beta * l_normal + gamma * l_scale


def psnr(a, b) -> float:
    a, b = _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))
