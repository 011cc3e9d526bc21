"""HexPlane spatiotemporal encoder, latent MLP and multi-head deformation decoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .gaussians import GaussianScene, SceneGrad
from .numeric import MLP, ParamBlock, ShapeError

log = logging.getLogger(__name__)

PLANES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
PLANE_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")
HEADS = (("dx", 3), ("ds", 3), ("dr", 4))
DEF_WIDTH = 10


@dataclass
class DeformationDelta:
    dx: np.ndarray  # (N, 3)
    ds: np.ndarray  # (N, 3)
    dr: np.ndarray  # (N, 4)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.dx, self.ds, self.dr], axis=1)

    @classmethod
    def split(cls, v: np.ndarray) -> "DeformationDelta":
        return cls(v[:, 0:3], v[:, 3:6], v[:, 6:10])


@dataclass
class HexPlaneField:
    bounds: np.ndarray                      # (4, 2): [min, max] for x, y, z, t
    planes: list[list[ParamBlock]]          # [level][plane] -> (res, res, h)
    latent: MLP
    heads: dict[str, MLP]
    clamped_queries: int = field(default=0, compare=False)

    @classmethod
    def create(cls, bounds, resolutions: Sequence[int] = (16, 32), channels: int = 8,
               latent_hidden: int = 64, latent_out: int = 64, decoder_hidden: int = 64,
               seed: int = 0, init_range: float = 0.1) -> "HexPlaneField":
        bounds = np.asarray(bounds, dtype=np.float64)
        if bounds.shape == (3, 2):
            bounds = np.vstack([bounds, [0.0, 1.0]])
        if bounds.shape != (4, 2) or np.any(bounds[:, 1] <= bounds[:, 0]):
            raise ValueError("bounds need positive extent on x, y, z, t")
        rng = np.random.default_rng(seed)
        planes = []
        for li, res in enumerate(resolutions, start=1):
            planes.append([ParamBlock(f"hexplane/level{li}/plane{name}",
                                      rng.uniform(-init_range, init_range, (res, res, channels)))
                           for name in PLANE_NAMES])
        f_h = len(resolutions) * channels
        latent = MLP.build("phi_d", [f_h, latent_hidden, latent_out], rng)
        heads = {name: MLP.build(f"decoder/{name}", [latent_out, decoder_hidden, k], rng,
                                 zero_last=True) for name, k in HEADS}
        return cls(bounds, planes, latent, heads)

    @property
    def channels(self) -> int:
        return self.planes[0][0].shape[2]

    @property
    def resolutions(self) -> list[int]:
        return [lvl[0].shape[0] for lvl in self.planes]

    @property
    def encoding_width(self) -> int:
        return len(self.planes) * self.channels

    def blocks(self) -> list[ParamBlock]:
        out = [b for lvl in self.planes for b in lvl]
        out += self.latent.blocks()
        for name, _ in HEADS:
            out += self.heads[name].blocks()
        return out

    def zero_grad(self) -> None:
        for b in self.blocks():
            b.zero_grad()


# ---------------------------------------------------------------- encode


def _normalized_coords(field_: HexPlaneField, positions: np.ndarray, t) -> tuple:
    n = positions.shape[0]
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    q = np.concatenate([positions, tt[:, None]], axis=1)
    lo, hi = field_.bounds[:, 0], field_.bounds[:, 1]
    u = (q - lo) / (hi - lo)
    inside = (u >= 0.0) & (u <= 1.0)
    n_out = int(np.sum(~np.all(inside, axis=1)))
    if n_out:
        field_.clamped_queries += n_out
        log.debug("clamped %d hexplane queries (total %d)", n_out, field_.clamped_queries)
    return np.clip(u, 0.0, 1.0), inside, hi - lo


def _bilinear(grid: np.ndarray, ua: np.ndarray, ub: np.ndarray):
    res_a, res_b = grid.shape[:2]
    fa = ua * (res_a - 1)
    fb = ub * (res_b - 1)
    ia = np.clip(np.floor(fa).astype(np.int64), 0, res_a - 2)
    ib = np.clip(np.floor(fb).astype(np.int64), 0, res_b - 2)
    wa = (fa - ia)[:, None]
    wb = (fb - ib)[:, None]
    v00, v10 = grid[ia, ib], grid[ia + 1, ib]
    v01, v11 = grid[ia, ib + 1], grid[ia + 1, ib + 1]
    val = (1 - wa) * (1 - wb) * v00 + wa * (1 - wb) * v10 + (1 - wa) * wb * v01 + wa * wb * v11
    return val, (ia, ib, wa, wb, v00, v10, v01, v11)


def hexplane_encode(positions, t, field_: HexPlaneField):
    """Per level: bilinear samples of the six planes fused by product; levels concatenated.

    Returns ``(f_h, cache)`` with ``f_h`` of shape (N, levels * channels).
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    u, inside, extent = _normalized_coords(field_, positions, t)
    per_level, caches = [], []
    for level in field_.planes:
        samples, lc = [], []
        for block, (a, b) in zip(level, PLANES):
            val, c = _bilinear(block.values, u[:, a], u[:, b])
            samples.append(val)
            lc.append(c)
        prod = samples[0].copy()
        for s in samples[1:]:
            prod = prod * s
        per_level.append(prod)
        caches.append((samples, lc))
    f_h = np.concatenate(per_level, axis=1)
    return f_h, (caches, inside, extent, positions.shape[0])


def hexplane_backward(field_: HexPlaneField, cache, g_fh: np.ndarray) -> np.ndarray:
    """Accumulate grid gradients; return the gradient w.r.t. query positions (N, 3)."""
    caches, inside, extent, n = cache
    h = field_.channels
    g_coord = np.zeros((n, 4))
    for li, (level, (samples, lc)) in enumerate(zip(field_.planes, caches)):
        g_prod = g_fh[:, li * h:(li + 1) * h]
        prefix = [np.ones_like(samples[0])]
        for s in samples[:-1]:
            prefix.append(prefix[-1] * s)
        suffix = [np.ones_like(samples[0])]
        for s in samples[:0:-1]:
            suffix.append(suffix[-1] * s)
        suffix = suffix[::-1]
        for p, (block, (a, b)) in enumerate(zip(level, PLANES)):
            g_s = g_prod * prefix[p] * suffix[p]
            ia, ib, wa, wb, v00, v10, v01, v11 = lc[p]
            res_a, res_b = block.shape[:2]
            grad = block.grad
            np.add.at(grad, (ia, ib), g_s * (1 - wa) * (1 - wb))
            np.add.at(grad, (ia + 1, ib), g_s * wa * (1 - wb))
            np.add.at(grad, (ia, ib + 1), g_s * (1 - wa) * wb)
            np.add.at(grad, (ia + 1, ib + 1), g_s * wa * wb)
            d_wa = (1 - wb) * (v10 - v00) + wb * (v11 - v01)
            d_wb = (1 - wa) * (v01 - v00) + wa * (v11 - v10)
            g_coord[:, a] += np.sum(g_s * d_wa, axis=1) * (res_a - 1)
            g_coord[:, b] += np.sum(g_s * d_wb, axis=1) * (res_b - 1)
    g_coord = np.where(inside, g_coord, 0.0) / extent
    return g_coord[:, :3]


def latent_encode(f_h: np.ndarray, field_: HexPlaneField):
    if f_h.shape[-1] != field_.latent.in_width:
        raise ShapeError(f"latent_encode expects width {field_.latent.in_width}, got {f_h.shape[-1]}")
    return field_.latent.forward(np.atleast_2d(f_h))


def decode_deformation(f_d: np.ndarray, field_: HexPlaneField):
    f_d = np.atleast_2d(f_d)
    outs, caches = {}, {}
    for name, _ in HEADS:
        head = field_.heads[name]
        if f_d.shape[1] != head.in_width:
            raise ShapeError(f"decoder/{name} expects width {head.in_width}")
        outs[name], caches[name] = head.forward(f_d)
    return DeformationDelta(outs["dx"], outs["ds"], outs["dr"]), caches


def decode_backward(field_: HexPlaneField, caches, g_delta: DeformationDelta) -> np.ndarray:
    g = None
    for name, _ in HEADS:
        gi = field_.heads[name].backward(caches[name], getattr(g_delta, name))
        g = gi if g is None else g + gi
    return g


# ---------------------------------------------------------------- deform


@dataclass
class DeformCache:
    hex_cache: tuple
    latent_cache: tuple
    decode_cache: dict


def deformation_delta(scene: GaussianScene, t: float, field_: HexPlaneField):
    f_h, hc = hexplane_encode(scene.positions, t, field_)
    f_d, lc = latent_encode(f_h, field_)
    delta, dc = decode_deformation(f_d, field_)
    return delta, DeformCache(hc, lc, dc)


def deform(scene: GaussianScene, t: float, field_: HexPlaneField):
    """Deformed scene at time ``t`` plus the (N, 10) deltas actually applied."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    delta, cache = deformation_delta(scene, t, field_)
    out = scene.with_geometry(scene.positions + delta.dx, scene.log_scales + delta.ds,
                              scene.rotations + delta.dr)
    return out, delta.stacked(), cache


def deform_backward(field_: HexPlaneField, cache: DeformCache, g_out: SceneGrad,
                    g_fdef: np.ndarray | None = None) -> SceneGrad:
    """Backward of :func:`deform`; parameter grads accumulate into ``field_``.

    ``g_fdef`` is an extra gradient on the deltas (from consumers of f_def).
    """
    g_delta = np.concatenate([g_out.positions, g_out.log_scales, g_out.rotations], axis=1)
    if g_fdef is not None:
        g_delta = g_delta + g_fdef
    g_fd = decode_backward(field_, cache.decode_cache, DeformationDelta.split(g_delta))
    g_fh = field_.latent.backward(cache.latent_cache, g_fd)
    g_pos = hexplane_backward(field_, cache.hex_cache, g_fh)
    return SceneGrad(g_out.positions + g_pos, g_out.log_scales.copy(), g_out.rotations.copy(),
                     g_out.opacity_logits.copy(), g_out.sh_coeffs.copy(),
                     g_out.context_features.copy())
