"""Training losses and image metrics, each with an analytic gradient where training needs one."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numeric import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_SENTINEL = 99.0
TERMS = ("rgb", "dssim", "tv", "depth", "feature")


@dataclass
class LossWeights:
    rgb: float = 1.0
    dssim: float = 0.2
    tv: float = 1.0
    depth: float = 0.5
    feature: float = 1.0

    def __post_init__(self):
        for name in TERMS:
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class LossReport:
    terms: dict[str, float]
    weights: LossWeights = field(default_factory=LossWeights)
    total: float = 0.0

    def __getitem__(self, name: str) -> float:
        return self.terms[name]


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def l1_loss(pred, target) -> float:
    p, t = _check(pred, target)
    return float(np.mean(np.abs(p - t)))


def l1_grad(pred, target) -> np.ndarray:
    p, t = _check(pred, target)
    return np.sign(p - t) / p.size


# ------------------------------------------------------------------ SSIM


def _gauss_kernel() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


_KERNEL = _gauss_kernel()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter, valid region only; img is (H, W, C)."""
    rows = sliding_window_view(img, SSIM_WINDOW, axis=0) @ _KERNEL
    return sliding_window_view(rows, SSIM_WINDOW, axis=1) @ _KERNEL


def _filter_adjoint(g: np.ndarray) -> np.ndarray:
    pad = SSIM_WINDOW - 1
    return _filter_valid(np.pad(g, ((pad, pad), (pad, pad), (0, 0))))


def _as_hwc(img: np.ndarray) -> np.ndarray:
    return img[:, :, None] if img.ndim == 2 else img


def _ssim_parts(pred, target):
    p, t = _check(pred, target)
    p, t = _as_hwc(p), _as_hwc(t)
    if p.shape[0] < SSIM_WINDOW or p.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    mu1, mu2 = _filter_valid(p), _filter_valid(t)
    e11, e22, e12 = _filter_valid(p * p), _filter_valid(t * t), _filter_valid(p * t)
    s11, s22, s12 = e11 - mu1 * mu1, e22 - mu2 * mu2, e12 - mu1 * mu2
    a1 = 2 * mu1 * mu2 + SSIM_C1
    a2 = 2 * s12 + SSIM_C2
    b1 = mu1 * mu1 + mu2 * mu2 + SSIM_C1
    b2 = s11 + s22 + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    return p, t, (mu1, mu2, a1, a2, b1, b2, smap)


def ssim_map(pred, target) -> np.ndarray:
    return _ssim_parts(pred, target)[2][-1]


def ssim(pred, target) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5) over the valid region and channels."""
    return float(np.mean(ssim_map(pred, target)))


def ssim_grad(pred, target) -> np.ndarray:
    """d mean-SSIM / d pred."""
    p, t, (mu1, mu2, a1, a2, b1, b2, smap) = _ssim_parts(pred, target)
    scale = 1.0 / smap.size
    d_mu1 = (2 * mu2 * a2 / (b1 * b2) - 2 * mu2 * a1 / (b1 * b2)
             - 2 * mu1 * smap / b1 + 2 * mu1 * smap / b2) * scale
    d_e11 = -smap / b2 * scale
    d_e12 = 2 * a1 / (b1 * b2) * scale
    g = _filter_adjoint(d_mu1) + 2 * p * _filter_adjoint(d_e11) + t * _filter_adjoint(d_e12)
    return g.reshape(np.shape(pred))


def dssim_loss(pred, target) -> float:
    return (1.0 - ssim(pred, target)) / 2.0


def dssim_grad(pred, target) -> np.ndarray:
    return -0.5 * ssim_grad(pred, target)


def masked_ssim(pred, target, mask) -> float:
    """Mean SSIM over window centres that fall on ``mask`` pixels; NaN if none do."""
    smap = ssim_map(pred, target)
    r = SSIM_WINDOW // 2
    m = np.asarray(mask, bool)[r:r + smap.shape[0], r:r + smap.shape[1]]
    if not m.any():
        return float("nan")
    return float(np.mean(smap[m]))


# ------------------------------------------------------------------- TV


def tv_loss(field_) -> float:
    """Mean squared difference of adjacent cells over every plane, level and channel."""
    total, count = 0.0, 0
    for block in _plane_blocks(field_):
        g = block.values
        d0 = np.diff(g, axis=0)
        d1 = np.diff(g, axis=1)
        total += float(np.sum(d0 * d0) + np.sum(d1 * d1))
        count += d0.size + d1.size
    return total / count if count else 0.0


def tv_backward(field_, weight: float = 1.0) -> None:
    blocks = list(_plane_blocks(field_))
    count = sum(np.diff(b.values, axis=0).size + np.diff(b.values, axis=1).size for b in blocks)
    if not count:
        return
    c = 2.0 * weight / count
    for block in blocks:
        g = block.values
        d0 = np.diff(g, axis=0)
        d1 = np.diff(g, axis=1)
        block.grad[1:] += c * d0
        block.grad[:-1] -= c * d0
        block.grad[:, 1:] += c * d1
        block.grad[:, :-1] -= c * d1


def _plane_blocks(field_):
    if hasattr(field_, "planes"):
        for level in field_.planes:
            yield from level
    else:
        yield from field_


# ---------------------------------------------------------------- depth


def depth_loss(pred, target, mask) -> float:
    p, t = _check(pred, target)
    m = np.asarray(mask, dtype=bool)
    if m.shape != p.shape:
        raise ShapeError("depth mask shape mismatch")
    if not m.any():
        return 0.0
    return float(np.mean(np.abs(p[m] - t[m])))


def depth_grad(pred, target, mask) -> np.ndarray:
    p, t = _check(pred, target)
    m = np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        return np.zeros_like(p)
    return np.where(m, np.sign(p - t), 0.0) / n


def depth_mask(accum, target_depth) -> np.ndarray:
    return (np.asarray(accum) > 0.5) & (np.asarray(target_depth) > 0)


# -------------------------------------------------------------- feature


def _cosines(pred, teacher):
    p, t = _check(pred, teacher)
    F = p.shape[-1]
    p2, t2 = p.reshape(-1, F), t.reshape(-1, F)
    pn = np.linalg.norm(p2, axis=1)
    tn = np.linalg.norm(t2, axis=1)
    valid = (pn >= 1e-8) & (tn > 0)
    dots = np.sum(p2 * t2, axis=1)
    cos = np.where(valid, dots / np.where(valid, pn * tn, 1.0), 0.0)
    return p, p2, t2, pn, tn, valid, cos


def feature_cosine_loss(pred, teacher) -> float:
    """Mean over pixels of ``1 - cos(pred, teacher)``; near-zero predictions count as 1."""
    cos = _cosines(pred, teacher)[-1]
    return float(np.mean(1.0 - cos))


def feature_cosine_grad(pred, teacher) -> np.ndarray:
    p, p2, t2, pn, tn, valid, cos = _cosines(pred, teacher)
    safe_pn = np.where(valid, pn, 1.0)
    safe_tn = np.where(valid, tn, 1.0)
    dcos = t2 / (safe_pn * safe_tn)[:, None] - cos[:, None] * p2 / (safe_pn**2)[:, None]
    g = -np.where(valid[:, None], dcos, 0.0) / p2.shape[0]
    return g.reshape(p.shape)


# ---------------------------------------------------------------- total


def total_loss(terms: dict[str, float], weights: LossWeights | None = None) -> LossReport:
    weights = weights or LossWeights()
    vals = {k: float(terms.get(k, 0.0)) for k in TERMS}
    total = sum(getattr(weights, k) * vals[k] for k in TERMS)
    return LossReport(vals, weights, float(total))


# --------------------------------------------------------------- metrics


def mse(pred, target) -> float:
    p, t = _check(pred, target)
    return float(np.mean((p - t) ** 2))


def psnr_from_mse(m: float) -> float:
    if m <= 0:
        return PSNR_SENTINEL
    return float(10.0 * np.log10(1.0 / m))


def psnr(pred, target) -> float:
    return psnr_from_mse(mse(pred, target))


def masked_psnr(pred, target, mask) -> float:
    p, t = _check(pred, target)
    m = np.asarray(mask, bool)
    if not m.any():
        return float("nan")
    return psnr_from_mse(float(np.mean((p[m] - t[m]) ** 2)))
