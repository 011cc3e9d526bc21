"""The full per-frame model: canonical Gaussians, deformation field and DCN.

``Model.forward`` runs deform -> awareness -> DCN -> render and keeps what
``Model.backward`` needs to push image gradients into every parameter block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .awareness import DcnCache, DcnParams, aggregate_awareness, dcn_compensate, \
    dcn_compensate_backward, time_embedding
from .deformation import DEF_WIDTH, DeformCache, HexPlaneField, deform, deform_backward
from .gaussians import Camera, GaussianScene, SceneGrad, normalize_rows, normalize_rows_backward
from .numeric import ParamBlock
from .rasterizer import SKIP_ALPHA, RenderOutput, render, render_backward

SCENE_BLOCKS = GaussianScene.ARRAYS


def scene_blocks(scene: GaussianScene) -> dict[str, ParamBlock]:
    return {name: ParamBlock(f"gaussians/{name}", getattr(scene, name).copy())
            for name in SCENE_BLOCKS}


@dataclass
class ForwardCache:
    scene: GaussianScene               # canonical scene the step started from
    dynamic: bool
    deform_cache: Optional[DeformCache] = None
    dcn_cache: Optional[DcnCache] = None
    feat_norm: Optional[np.ndarray] = None
    time_dim: int = 0


@dataclass
class Model:
    gaussians: dict[str, ParamBlock]
    field: HexPlaneField
    dcn: DcnParams
    time_dim: int = 64
    dcn_enabled: bool = True
    awareness_mask: dict[str, bool] = field(default_factory=lambda: dict(time=True, def_=True,
                                                                           con=True))
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def scene(self) -> GaussianScene:
        return GaussianScene(*(self.gaussians[n].values for n in SCENE_BLOCKS))

    @property
    def feature_dim(self) -> int:
        return self.gaussians["context_features"].shape[1]

    def __len__(self) -> int:
        return self.gaussians["positions"].shape[0]

    def gaussian_blocks(self) -> list[ParamBlock]:
        return [self.gaussians[n] for n in SCENE_BLOCKS]

    def network_blocks(self) -> list[ParamBlock]:
        return self.field.blocks() + self.dcn.blocks()

    def blocks(self) -> list[ParamBlock]:
        return self.gaussian_blocks() + self.network_blocks()

    def zero_grad(self) -> None:
        for b in self.blocks():
            b.zero_grad()

    def keep(self, idx: np.ndarray) -> None:
        for b in self.gaussian_blocks():
            b.values = b.values[idx].copy()
            b.grad = np.zeros_like(b.values)

    # -- forward / backward ------------------------------------------

    def dynamic_scene(self, t: float, frame_index: int, scene: GaussianScene | None = None):
        """Scene at time ``t`` after deformation and (when enabled) compensation."""
        scene = self.scene if scene is None else scene
        deformed, f_def, dc = deform(scene, t, self.field)
        cache = ForwardCache(scene, True, dc, time_dim=self.time_dim)
        if not self.dcn_enabled:
            return deformed, cache
        f_con, norm = normalize_rows(scene.context_features)
        cache.feat_norm = norm
        m = self.awareness_mask
        f_time = time_embedding(frame_index, self.time_dim)
        agg = aggregate_awareness(f_time if m["time"] else np.zeros_like(f_time),
                                  f_def if m["def_"] else np.zeros_like(f_def),
                                  f_con if m["con"] else np.zeros_like(f_con))
        out, cache.dcn_cache = dcn_compensate(deformed, agg, self.dcn)
        return out, cache

    def forward(self, camera: Camera, t: float = 0.0, frame_index: int = 0, dynamic: bool = True,
                skip_threshold: float = SKIP_ALPHA, scene: GaussianScene | None = None):
        scene = self.scene if scene is None else scene
        if dynamic:
            shown, cache = self.dynamic_scene(t, frame_index, scene)
        else:
            shown, cache = scene, ForwardCache(scene, False)
        out = render(shown, camera, self.background, skip_threshold=skip_threshold)
        return out, cache

    def backward(self, out: RenderOutput, cache: ForwardCache, grad_rgb=None, grad_depth=None,
                 grad_feature=None) -> None:
        """Accumulate gradients of every parameter block (Gaussians, field, DCN)."""
        g = render_backward(out, grad_rgb, grad_depth, grad_feature)
        if cache.dynamic:
            g_fdef = None
            g_con = None
            if cache.dcn_cache is not None:
                g, g_agg = dcn_compensate_backward(self.dcn, cache.dcn_cache, g)
                m = self.awareness_mask
                d = cache.time_dim
                if m["def_"]:
                    g_fdef = g_agg[:, d:d + DEF_WIDTH]
                if m["con"]:
                    g_con = normalize_rows_backward(cache.scene.context_features, cache.feat_norm,
                                                    g_agg[:, d + DEF_WIDTH:])
            g = deform_backward(self.field, cache.deform_cache, g, g_fdef)
            if g_con is not None:
                g.context_features += g_con
        self.accumulate(g)

    def accumulate(self, g: SceneGrad) -> None:
        for name in SCENE_BLOCKS:
            self.gaussians[name].grad += getattr(g, name)
