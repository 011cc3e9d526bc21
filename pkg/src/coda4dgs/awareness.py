"""Time embedding, awareness aggregation and the deformation compensation network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deformation import DEF_WIDTH
from .gaussians import GaussianScene, SceneGrad
from .numeric import MLP, ParamBlock, ShapeError, linear, linear_backward, linear_block, sigmoid

AWARENESS_PARTS = ("time", "def", "con")


def time_embedding(frame_index: int, d: int = 64) -> np.ndarray:
    """``sin(tau / 10000**(2i/d))`` for i = 0..d-1, sine terms only."""
    if d < 2 or d % 2:
        raise ValueError("embedding dimension must be even and >= 2")
    if frame_index < 0:
        raise ValueError("frame index must be non-negative")
    i = np.arange(d, dtype=np.float64)
    return np.sin(float(frame_index) / 10000.0 ** (2.0 * i / d))


def aggregate_awareness(f_time: np.ndarray, f_def: np.ndarray, f_con: np.ndarray,
                        time_dim: int | None = None, feature_dim: int | None = None) -> np.ndarray:
    """Concatenate per-Gaussian ``f_time | f_def | f_con``.

    ``f_time`` may be one d-vector shared by every Gaussian.
    """
    f_def = np.atleast_2d(f_def)
    f_con = np.atleast_2d(f_con)
    n = f_def.shape[0]
    f_time = np.asarray(f_time, dtype=np.float64)
    if f_time.ndim == 1:
        f_time = np.broadcast_to(f_time, (n, f_time.shape[0]))
    if f_def.shape[1] != DEF_WIDTH:
        raise ShapeError(f"f_def must have width {DEF_WIDTH}, got {f_def.shape[1]}")
    if f_con.shape[0] != n or f_time.shape[0] != n:
        raise ShapeError("awareness components disagree on the number of Gaussians")
    if time_dim is not None and f_time.shape[1] != time_dim:
        raise ShapeError(f"f_time must have width {time_dim}")
    if feature_dim is not None and f_con.shape[1] != feature_dim:
        raise ShapeError(f"f_con must have width {feature_dim}")
    return np.concatenate([f_time, f_def, f_con], axis=1)


@dataclass
class DcnParams:
    phi_p: MLP
    phi_s: ParamBlock

    @classmethod
    def create(cls, in_width: int, hidden=(64, 64), seed: int = 0) -> "DcnParams":
        rng = np.random.default_rng(seed)
        phi_p = MLP.build("dcn/phi_p", [in_width, *hidden, DEF_WIDTH], rng, zero_last=True)
        phi_s = linear_block("dcn/phi_s/linear", in_width, DEF_WIDTH, rng)
        return cls(phi_p, phi_s)

    @property
    def in_width(self) -> int:
        return self.phi_p.in_width

    def blocks(self) -> list[ParamBlock]:
        return self.phi_p.blocks() + [self.phi_s]

    def zero_grad(self) -> None:
        for b in self.blocks():
            b.zero_grad()

    def parameter_count(self) -> int:
        return sum(b.values.size for b in self.blocks())


@dataclass
class DcnCache:
    aggregate: np.ndarray
    p_cache: tuple
    residual: np.ndarray
    mask: np.ndarray


def dcn_compensation(aggregate: np.ndarray, params: DcnParams):
    """Gated residual ``phi_p(a) * sigmoid(phi_s(a))`` per Gaussian, (N, 10)."""
    if aggregate.shape[1] != params.in_width:
        raise ShapeError(f"DCN expects aggregate width {params.in_width}, got {aggregate.shape[1]}")
    residual, pc = params.phi_p.forward(aggregate)
    mask = sigmoid(linear(params.phi_s, aggregate))
    return residual * mask, DcnCache(aggregate, pc, residual, mask)


def dcn_compensate(deformed: GaussianScene, aggregate: np.ndarray, params: DcnParams):
    comp, cache = dcn_compensation(aggregate, params)
    out = deformed.with_geometry(deformed.positions + comp[:, 0:3],
                                 deformed.log_scales + comp[:, 3:6],
                                 deformed.rotations + comp[:, 6:10])
    return out, cache


def dcn_backward(params: DcnParams, cache: DcnCache, g_comp: np.ndarray) -> np.ndarray:
    """Accumulate parameter grads; return dL/d(aggregate)."""
    g_res = g_comp * cache.mask
    g_mask = g_comp * cache.residual
    g_logit = g_mask * cache.mask * (1.0 - cache.mask)
    g_agg = params.phi_p.backward(cache.p_cache, g_res)
    g_agg = g_agg + linear_backward(params.phi_s, cache.aggregate, g_logit)
    return g_agg


def dcn_compensate_backward(params: DcnParams, cache: DcnCache, g_out: SceneGrad):
    """Returns (scene grad w.r.t. the deformed input, dL/d(aggregate))."""
    g_comp = np.concatenate([g_out.positions, g_out.log_scales, g_out.rotations], axis=1)
    return g_out, dcn_backward(params, cache, g_comp)
