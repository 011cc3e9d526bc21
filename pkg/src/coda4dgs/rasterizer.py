"""Differentiable splatting of Gaussians into RGB, depth, feature and accumulation images.

Splats are depth-sorted once globally.  Each pixel then composites the
splats whose footprint can pass the skip threshold there (every splat when
the threshold is zero), so per-pixel arrays stay short on real scenes.  The backward pass mirrors the
forward exactly, including the 0.99 alpha clamp, the skip threshold and early
termination, which are treated as constant masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gaussians import (Camera, GaussianScene, SceneGrad, LOWPASS, build_covariance,
                        build_covariance_backward, normalize_rows, normalize_rows_backward,
                        projection_jacobian, sh_basis, sh_basis_jacobian, SH_BASIS)

ALPHA_MAX = 0.99
SKIP_ALPHA = 1.0 / 255.0
STOP_TRANSMITTANCE = 1e-4
DEPTH_MIN_ACCUM = 0.5
CULL_SIGMA = 3.0


class UsageError(RuntimeError):
    pass


@dataclass
class ScreenSplat:
    mean2d: np.ndarray
    cov2d: np.ndarray
    inv_cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    feature: np.ndarray
    radius: float


@dataclass
class ScreenSplats:
    """Projected, culled, depth-sorted splats stored column-wise."""

    index: np.ndarray     # (K,) source Gaussian index
    mean2d: np.ndarray    # (K, 2) pixel coords (x = column, y = row)
    cov2d: np.ndarray     # (K, 2, 2)
    conic: np.ndarray     # (K, 2, 2) inverse of cov2d
    depth: np.ndarray     # (K,)
    color: np.ndarray     # (K, 3) clamped to [0, 1]
    opacity: np.ndarray   # (K,)
    feature: np.ndarray   # (K, F)
    radius: np.ndarray    # (K,)
    _proj: Optional[dict] = None

    def __len__(self) -> int:
        return self.index.shape[0]

    def __getitem__(self, i: int) -> ScreenSplat:
        return ScreenSplat(self.mean2d[i], self.cov2d[i], self.conic[i], float(self.depth[i]),
                           self.color[i], float(self.opacity[i]), self.feature[i],
                           float(self.radius[i]))

    @classmethod
    def from_arrays(cls, mean2d, cov2d, depth, color, opacity, feature) -> "ScreenSplats":
        """Build splats directly (tests, oracle comparisons); sorted by depth here."""
        depth = np.asarray(depth, dtype=np.float64)
        order = np.argsort(depth, kind="stable")
        cov2d = np.asarray(cov2d, dtype=np.float64)[order]
        return cls(order, np.asarray(mean2d, float)[order], cov2d, _inv2x2(cov2d),
                   depth[order], np.asarray(color, float)[order],
                   np.asarray(opacity, float)[order], np.asarray(feature, float)[order],
                   CULL_SIGMA * np.sqrt(_max_eig2x2(cov2d)))


@dataclass
class SplatGrads:
    mean2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    feature: np.ndarray


@dataclass
class RasterState:
    splats: ScreenSplats
    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray
    alpha: np.ndarray        # effective alpha after clamp/skip/termination (P, K)
    differentiable: np.ndarray  # mask where alpha depends smoothly on inputs
    t_before: np.ndarray
    weights: np.ndarray
    accum: np.ndarray
    depth_mask: np.ndarray
    depth: np.ndarray
    background: np.ndarray
    feature_background: np.ndarray
    shape: tuple[int, int]
    sel: np.ndarray            # (P, L) splat index per list slot, K marks padding
    dense_weights: np.ndarray  # (P, K) compositing weights scattered back per splat


@dataclass
class RenderOutput:
    rgb: np.ndarray       # (H, W, 3)
    depth: np.ndarray     # (H, W)
    feature: np.ndarray   # (H, W, F)
    accum: np.ndarray     # (H, W)
    state: Optional[RasterState] = None


def _inv2x2(m: np.ndarray) -> np.ndarray:
    a, b, c, d = m[:, 0, 0], m[:, 0, 1], m[:, 1, 0], m[:, 1, 1]
    det = a * d - b * c
    inv = np.empty_like(m)
    inv[:, 0, 0] = d / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -c / det
    inv[:, 1, 1] = a / det
    return inv


def _max_eig2x2(m: np.ndarray) -> np.ndarray:
    a, b, d = m[:, 0, 0], 0.5 * (m[:, 0, 1] + m[:, 1, 0]), m[:, 1, 1]
    mid = 0.5 * (a + d)
    return mid + np.sqrt(np.maximum(mid * mid - (a * d - b * b), 0.0))


# ------------------------------------------------------------ projection


def project_gaussians(scene: GaussianScene, camera: Camera, cull: bool = True) -> ScreenSplats:
    """Project to screen space, cull, and sort by camera depth (ties by index)."""
    n = len(scene)
    Rw, tw = camera.rotation, camera.translation
    mean_cam = scene.positions @ Rw.T + tw
    keep = mean_cam[:, 2] > camera.near
    idx = np.nonzero(keep)[0]
    t = mean_cam[idx]
    cov3d = build_covariance(scene.log_scales[idx], scene.rotations[idx]) if idx.size else \
        np.zeros((0, 3, 3))
    J = projection_jacobian(t, camera.fx, camera.fy) if idx.size else np.zeros((0, 2, 3))
    T = J @ Rw
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2) + LOWPASS * np.eye(2)
    mean2d = np.stack([camera.fx * t[:, 0] / t[:, 2] + camera.cx,
                       camera.fy * t[:, 1] / t[:, 2] + camera.cy], axis=1) if idx.size else \
        np.zeros((0, 2))
    radius = CULL_SIGMA * np.sqrt(_max_eig2x2(cov2d)) if idx.size else np.zeros(0)
    if cull and idx.size:
        inside = ((mean2d[:, 0] + radius >= -0.5) & (mean2d[:, 0] - radius <= camera.width - 0.5)
                  & (mean2d[:, 1] + radius >= -0.5)
                  & (mean2d[:, 1] - radius <= camera.height - 0.5))
        sel = np.nonzero(inside)[0]
        idx, t, cov3d, J, T, cov2d, mean2d, radius = (
            a[sel] for a in (idx, t, cov3d, J, T, cov2d, mean2d, radius))
    order = np.argsort(t[:, 2], kind="stable")
    idx, t, cov3d, J, T, cov2d, mean2d, radius = (
        a[order] for a in (idx, t, cov3d, J, T, cov2d, mean2d, radius))

    view = scene.positions[idx] - camera.center
    view_norm = np.linalg.norm(view, axis=1, keepdims=True)
    dirs = view / view_norm
    basis = sh_basis(dirs) if idx.size else np.zeros((0, SH_BASIS))
    coeffs = scene.sh_coeffs[idx].reshape(-1, 3, SH_BASIS)
    raw_color = np.einsum("ncb,nb->nc", coeffs, basis) + 0.5
    color = np.clip(raw_color, 0.0, 1.0)
    opacity = 1.0 / (1.0 + np.exp(-scene.opacity_logits[idx, 0]))
    feat_raw = scene.context_features[idx]
    feature, feat_norm = normalize_rows(feat_raw)

    proj = dict(n=n, mean_cam=t, cov3d=cov3d, J=J, T=T, dirs=dirs, view_norm=view_norm,
                basis=basis, color_live=(raw_color > 0) & (raw_color < 1), feat_raw=feat_raw,
                feat_norm=feat_norm, camera=camera, scene=scene)
    return ScreenSplats(idx, mean2d, cov2d, _inv2x2(cov2d), t[:, 2].copy(), color, opacity,
                        feature, radius, proj)


def project_backward(grads: SplatGrads, splats: ScreenSplats) -> SceneGrad:
    """Chain splat-space gradients back to the raw scene attributes."""
    p = splats._proj
    if p is None:
        raise UsageError("splats carry no projection state; call project_gaussians")
    scene: GaussianScene = p["scene"]
    cam: Camera = p["camera"]
    idx = splats.index
    out = SceneGrad.zeros_like(scene)
    if idx.size == 0:
        return out
    Rw = cam.rotation
    t = p["mean_cam"]
    tx, ty, tz = t.T

    # colour -> SH coefficients and view direction
    g_col = grads.color * p["color_live"]
    basis = p["basis"]
    out.sh_coeffs[idx] = (g_col[:, :, None] * basis[:, None, :]).reshape(len(idx), -1)
    coeffs = scene.sh_coeffs[idx].reshape(-1, 3, SH_BASIS)
    g_basis = np.einsum("nc,ncb->nb", g_col, coeffs)
    g_dir = np.einsum("nb,nbk->nk", g_basis, sh_basis_jacobian(p["dirs"]))
    d = p["dirs"]
    g_pos = (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / p["view_norm"]

    # conic -> 2D covariance -> (3D covariance, Jacobian)
    A = splats.conic
    gA = 0.5 * (grads.conic + np.swapaxes(grads.conic, 1, 2))
    g_cov2d = -np.swapaxes(A, 1, 2) @ gA @ np.swapaxes(A, 1, 2)
    T, cov3d = p["T"], p["cov3d"]
    g_cov3d = np.swapaxes(T, 1, 2) @ g_cov2d @ T
    g_T = 2.0 * g_cov2d @ T @ cov3d
    g_J = g_T @ Rw.T

    fx, fy = cam.fx, cam.fy
    g_t = np.zeros_like(t)
    g_t[:, 0] += grads.mean2d[:, 0] * fx / tz
    g_t[:, 1] += grads.mean2d[:, 1] * fy / tz
    g_t[:, 2] += -grads.mean2d[:, 0] * fx * tx / tz**2 - grads.mean2d[:, 1] * fy * ty / tz**2
    g_t[:, 0] += g_J[:, 0, 2] * (-fx / tz**2)
    g_t[:, 1] += g_J[:, 1, 2] * (-fy / tz**2)
    g_t[:, 2] += (g_J[:, 0, 0] * (-fx / tz**2) + g_J[:, 0, 2] * (2 * fx * tx / tz**3)
                  + g_J[:, 1, 1] * (-fy / tz**2) + g_J[:, 1, 2] * (2 * fy * ty / tz**3))
    g_t[:, 2] += grads.depth
    g_pos += g_t @ Rw
    out.positions[idx] = g_pos

    g_ls, g_q = build_covariance_backward(scene.log_scales[idx], scene.rotations[idx], g_cov3d)
    out.log_scales[idx] = g_ls
    out.rotations[idx] = g_q

    op = splats.opacity
    out.opacity_logits[idx, 0] = grads.opacity * op * (1.0 - op)
    out.context_features[idx] = normalize_rows_backward(p["feat_raw"], p["feat_norm"],
                                                        grads.feature)
    return out


# ------------------------------------------------------------ compositing


def _pixel_lists(splats: ScreenSplats, H: int, W: int, skip_threshold: float) -> np.ndarray:
    """(P, L) splat indices per pixel in depth order, padded with ``K``.

    With a positive skip threshold a splat can only be active where
    ``opacity * G >= skip``, i.e. inside an ellipse we bound by a box; pairs
    outside it are dropped up front.  Without a threshold every pixel lists
    every splat.
    """
    K = len(splats)
    P = H * W
    if skip_threshold <= 0 or K == 0:
        return np.broadcast_to(np.arange(K), (P, K))
    op = splats.opacity
    reach = np.where(op > skip_threshold,
                     np.sqrt(2.0 * np.log(np.maximum(op, skip_threshold) / skip_threshold)), -1.0)
    r = np.sqrt(_max_eig2x2(splats.cov2d)) * reach * (1 + 1e-9) + 1e-9
    mx, my = splats.mean2d[:, 0], splats.mean2d[:, 1]
    x0 = np.clip(np.ceil(mx - r), 0, W).astype(np.int64)
    x1 = np.clip(np.floor(mx + r) + 1, 0, W).astype(np.int64)
    y0 = np.clip(np.ceil(my - r), 0, H).astype(np.int64)
    y1 = np.clip(np.floor(my + r) + 1, 0, H).astype(np.int64)
    bw = np.where(reach > 0, np.maximum(x1 - x0, 0), 0)
    bh = np.where(reach > 0, np.maximum(y1 - y0, 0), 0)
    count = bw * bh
    total = int(count.sum())
    k = np.repeat(np.arange(K), count)
    local = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
    px = x0[k] + local % bw[k]
    py = y0[k] + local // bw[k]
    A = splats.conic[k]
    dx = px - splats.mean2d[k, 0]
    dy = py - splats.mean2d[k, 1]
    power = -0.5 * (A[:, 0, 0] * dx * dx + A[:, 1, 1] * dy * dy) \
        - 0.5 * (A[:, 0, 1] + A[:, 1, 0]) * dx * dy
    hit = op[k] * np.exp(np.minimum(power, 0.0)) >= skip_threshold
    k, pix = k[hit], (py * W + px)[hit]
    order = np.argsort(pix * (K + 1) + k, kind="stable")
    k, pix = k[order], pix[order]
    per_pixel = np.bincount(pix, minlength=P)
    L = int(per_pixel.max()) if pix.size else 0
    slot = np.arange(pix.size) - np.repeat(np.cumsum(per_pixel) - per_pixel, per_pixel)
    sel = np.full((P, L), K, dtype=np.int64)
    sel[pix, slot] = k
    return sel


def _padded(a: np.ndarray) -> np.ndarray:
    return np.concatenate([a, np.zeros((1,) + a.shape[1:])], axis=0)


def _scatter_dense(values: np.ndarray, sel: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros((values.shape[0], K + 1))
    np.put_along_axis(out, sel, values, axis=1)
    return out[:, :K]


def _composite(weights: np.ndarray, accum: np.ndarray, values: np.ndarray,
               background: np.ndarray) -> np.ndarray:
    return weights @ values + (1.0 - accum)[:, None] * background[None, :]


def rasterize(splats: ScreenSplats, camera: Camera, background, feature_background=None,
              skip_threshold: float = SKIP_ALPHA, early_stop: bool = True) -> RenderOutput:
    H, W = camera.height, camera.width
    K = len(splats)
    F = splats.feature.shape[1]
    background = np.asarray(background, dtype=np.float64)
    fbg = np.zeros(F) if feature_background is None else \
        np.asarray(feature_background, dtype=np.float64)
    ys, xs = np.mgrid[0:H, 0:W]
    px = xs.reshape(-1).astype(np.float64)
    py = ys.reshape(-1).astype(np.float64)

    sel = _pixel_lists(splats, H, W, skip_threshold)
    mean = _padded(splats.mean2d)[sel]
    A = _padded(splats.conic)[sel]
    opacity = _padded(splats.opacity)[sel]
    dx = px[:, None] - mean[..., 0]
    dy = py[:, None] - mean[..., 1]
    power = -0.5 * (A[..., 0, 0] * dx * dx + A[..., 1, 1] * dy * dy) \
        - 0.5 * (A[..., 0, 1] + A[..., 1, 0]) * dx * dy
    gauss = np.exp(np.minimum(power, 0.0))
    raw = opacity * gauss
    alpha = np.minimum(raw, ALPHA_MAX)
    active = (alpha >= skip_threshold) & (power <= 0.0) & (sel < K)
    alpha = np.where(active, alpha, 0.0)
    if early_stop:
        t_after = np.cumprod(1.0 - alpha, axis=1)
        alpha = np.where(t_after >= STOP_TRANSMITTANCE, alpha, 0.0)
    live = alpha > 0
    differentiable = live & (raw < ALPHA_MAX)
    one_minus = 1.0 - alpha
    t_before = np.ones_like(alpha)
    if alpha.shape[1] > 1:
        t_before[:, 1:] = np.cumprod(one_minus[:, :-1], axis=1)
    weights = alpha * t_before
    accum = weights.sum(axis=1)
    dense_w = _scatter_dense(weights, sel, K)

    rgb = _composite(dense_w, accum, splats.color, background)
    feature = _composite(dense_w, accum, splats.feature, fbg)
    depth_mask = accum > DEPTH_MIN_ACCUM
    depth = np.where(depth_mask, (dense_w @ splats.depth) / np.where(depth_mask, accum, 1.0), 0.0)

    state = RasterState(splats, dx, dy, gauss, alpha, differentiable, t_before, weights, accum,
                        depth_mask, depth, background, fbg, (H, W), sel, dense_w)
    return RenderOutput(rgb.reshape(H, W, 3), depth.reshape(H, W), feature.reshape(H, W, F),
                        accum.reshape(H, W), state)


def rasterize_backward(grad_rgb, grad_depth, grad_feature, grad_accum,
                       state: Optional[RasterState]) -> SplatGrads:
    """Gradients of the four output images w.r.t. every splat field.

    Any of the image gradients may be ``None``.
    """
    if state is None:
        raise UsageError("rasterize_backward needs the state saved by rasterize")
    s = state.splats
    P = state.weights.shape[0]
    K = len(s)
    F = s.feature.shape[1]
    sel = state.sel
    g_rgb = np.zeros((P, 3)) if grad_rgb is None else np.asarray(grad_rgb).reshape(P, 3)
    g_feat = np.zeros((P, F)) if grad_feature is None else np.asarray(grad_feature).reshape(P, F)
    g_acc = np.zeros(P) if grad_accum is None else np.asarray(grad_accum).reshape(P).copy()
    g_dep = np.zeros(P) if grad_depth is None else np.asarray(grad_depth).reshape(P)
    w = state.weights

    # dL/dw for every listed (pixel, splat) pair
    dense_G = g_rgb @ s.color.T + g_feat @ s.feature.T
    G = np.take_along_axis(np.concatenate([dense_G, np.zeros((P, 1))], axis=1), sel, axis=1)
    G -= (g_rgb @ state.background + g_feat @ state.feature_background - g_acc)[:, None]
    dm = state.depth_mask
    g_dep_n = np.where(dm, g_dep / np.where(dm, state.accum, 1.0), 0.0)
    G += g_dep_n[:, None] * (_padded(s.depth)[sel] - state.depth[:, None])

    dense_w = state.dense_weights
    g_color = dense_w.T @ g_rgb
    g_feature = dense_w.T @ g_feat
    g_depth = dense_w.T @ g_dep_n

    # w_k = a_k * prod_{j<k}(1 - a_j)
    Q = G * w
    rev = np.cumsum(Q[:, ::-1], axis=1)[:, ::-1]
    suffix = rev - Q
    a = state.alpha
    g_alpha = (G * state.t_before - suffix / (1.0 - a)) * state.differentiable

    flat = sel.reshape(-1)

    def per_splat(v):
        return np.bincount(flat, weights=v.reshape(-1), minlength=K + 1)[:K]

    g_opacity = per_splat(g_alpha * state.gauss)
    g_power = g_alpha * _padded(s.opacity)[sel] * state.gauss
    A = _padded(s.conic)[sel]
    b = 0.5 * (A[..., 0, 1] + A[..., 1, 0])
    dx, dy = state.dx, state.dy
    g_mean = np.stack([per_splat(g_power * (A[..., 0, 0] * dx + b * dy)),
                       per_splat(g_power * (b * dx + A[..., 1, 1] * dy))], axis=1)
    g_conic = np.empty((K, 2, 2))
    g_conic[:, 0, 0] = -0.5 * per_splat(g_power * dx * dx)
    g_conic[:, 1, 1] = -0.5 * per_splat(g_power * dy * dy)
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = -0.5 * per_splat(g_power * dx * dy)
    return SplatGrads(g_mean, g_conic, g_depth, g_color, g_opacity, g_feature)


# ------------------------------------------------------------ convenience


def render(scene: GaussianScene, camera: Camera, background=(0.0, 0.0, 0.0),
           feature_background=None, skip_threshold: float = SKIP_ALPHA,
           early_stop: bool = True) -> RenderOutput:
    splats = project_gaussians(scene, camera)
    return rasterize(splats, camera, background, feature_background, skip_threshold, early_stop)


def render_backward(out: RenderOutput, grad_rgb=None, grad_depth=None, grad_feature=None,
                    grad_accum=None) -> SceneGrad:
    if out.state is None:
        raise UsageError("render output has no saved state")
    sg = rasterize_backward(grad_rgb, grad_depth, grad_feature, grad_accum, out.state)
    return project_backward(sg, out.state.splats)
