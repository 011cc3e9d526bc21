"""Scene editing on trained models: feature-query segmentation, extraction,
rigid transforms, merging scenes that keep their own deformation fields,
and PCA visualization of rendered feature images."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .gaussians import Camera, GaussianScene, normalize_rows, quaternion_multiply, \
    quaternion_to_matrix
from .pipeline import Model
from .rasterizer import SKIP_ALPHA, RenderOutput, render

log = logging.getLogger(__name__)


class SemanticError(ValueError):
    """Well-formed input that cannot be honoured (feature width clash, F < 3, ...)."""


# ------------------------------------------------------------- segment


def feature_similarity(scene: GaussianScene, query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != scene.feature_dim:
        raise SemanticError(f"query has {q.shape[0]} dims, scene features have {scene.feature_dim}")
    qn = np.linalg.norm(q)
    if qn == 0:
        raise SemanticError("query vector is zero")
    return scene.normalized_features() @ (q / qn)


def link_radius(scene: GaussianScene, ids: np.ndarray) -> float:
    """Twice the median Gaussian scale (mean of the three axes) among ``ids``."""
    return 2.0 * float(np.median(scene.scales[ids].mean(axis=1)))


def largest_cluster(points: np.ndarray, radius: float) -> np.ndarray:
    """Positions (into ``points``) of the largest single-linkage component.

    Ties go to the component containing the lowest index.
    """
    n = len(points)
    if n <= 1:
        return np.arange(n)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    sizes = np.bincount(labels)
    best = np.flatnonzero(sizes == sizes.max())
    first = [np.flatnonzero(labels == b)[0] for b in best]
    winner = best[int(np.argmin(first))]
    return np.flatnonzero(labels == winner)


def segment(scene: GaussianScene, query, threshold: float) -> np.ndarray:
    """Sorted ids with ``cos(f_con, query) >= threshold``, reduced to their largest
    spatially connected cluster."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    cand = np.flatnonzero(feature_similarity(scene, query) >= threshold)
    if cand.size == 0:
        log.warning("segment: no Gaussian reaches cosine %.3f", threshold)
        return cand
    keep = largest_cluster(scene.positions[cand], link_radius(scene, cand))
    return np.sort(cand[keep])


# -------------------------------------------------------- editable scene


@dataclass
class ScenePart:
    """Canonical Gaussians plus the model whose field deforms them."""

    scene: GaussianScene
    model: Optional[Model] = None
    dynamic: bool = True
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def at(self, t: float, frame_index: int) -> GaussianScene:
        if self.model is not None and self.dynamic and len(self.scene):
            s, _ = self.model.dynamic_scene(t, frame_index, self.scene)
        else:
            s = self.scene
        return rigid_transform(s, self.rotation, self.translation)


def rigid_transform(scene: GaussianScene, rotation, translation) -> GaussianScene:
    """``x -> R x + t`` on positions and ``q -> q_R * q`` on rotations."""
    q = np.asarray(rotation, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64)
    if q.shape != (4,) or t.shape != (3,):
        raise ValueError("rotation must be a quaternion (w, x, y, z) and translation a 3-vector")
    R = quaternion_to_matrix(q)
    pos = np.matmul(R, scene.positions[..., None])[..., 0] + t
    rot = quaternion_multiply(q / np.linalg.norm(q), scene.rotations)
    return scene.with_geometry(pos, scene.log_scales, rot)


@dataclass
class EditableScene:
    parts: list[ScenePart]

    @classmethod
    def from_model(cls, model: Model, dynamic: bool = True) -> "EditableScene":
        return cls([ScenePart(model.scene.copy(), model, dynamic)])

    @property
    def feature_dim(self) -> int:
        return self.parts[0].scene.feature_dim

    def __len__(self) -> int:
        return sum(len(p.scene) for p in self.parts)

    def field_ids(self) -> np.ndarray:
        """Per-Gaussian tag naming the deformation source of each Gaussian."""
        sources: list[int] = []
        tags = []
        for p in self.parts:
            key = id(p.model)
            if key not in sources:
                sources.append(key)
            tags.append(np.full(len(p.scene), sources.index(key)))
        return np.concatenate(tags) if tags else np.zeros(0, dtype=np.int64)

    def at(self, t: float, frame_index: int = 0) -> GaussianScene:
        snaps = [p.at(t, frame_index) for p in self.parts]
        return GaussianScene.concatenate(snaps) if snaps else GaussianScene.empty(0)

    def render(self, camera: Camera, t: float = 0.0, frame_index: int = 0, background=None,
               skip_threshold: float = SKIP_ALPHA) -> RenderOutput:
        if background is None:
            model = next((p.model for p in self.parts if p.model is not None), None)
            background = model.background if model is not None else np.zeros(3)
        return render(self.at(t, frame_index), camera, background, skip_threshold=skip_threshold)

    # -- operations --------------------------------------------------

    def extract(self, part: int, ids, remove: bool = True) -> ScenePart:
        """Split ``ids`` (indices into that part) out as a new part, appended last.

        With ``remove`` the original part keeps only the complement.
        """
        src = self.parts[part]
        ids = np.asarray(ids, dtype=np.int64)
        sel = np.zeros(len(src.scene), bool)
        sel[ids] = True
        piece = ScenePart(src.scene.subset(sel), src.model, src.dynamic, src.rotation.copy(),
                          src.translation.copy())
        if remove:
            self.parts[part] = ScenePart(src.scene.subset(~sel), src.model, src.dynamic,
                                         src.rotation, src.translation)
        self.parts.append(piece)
        return piece

    def transform(self, part: int, rotation=(1.0, 0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)):
        """Compose a rigid motion onto a part (applied after deformation at every t)."""
        p = self.parts[part]
        q = np.asarray(rotation, dtype=np.float64)
        q = q / np.linalg.norm(q)
        R = quaternion_to_matrix(q)
        p.translation = R @ p.translation + np.asarray(translation, dtype=np.float64)
        p.rotation = quaternion_multiply(q, p.rotation)

    def merge(self, other: "EditableScene | ScenePart") -> None:
        parts = other.parts if isinstance(other, EditableScene) else [other]
        for p in parts:
            if p.scene.feature_dim != self.feature_dim:
                raise SemanticError(f"cannot merge feature dim {p.scene.feature_dim} into "
                                    f"{self.feature_dim}")
        self.parts.extend(parts)


# ------------------------------------------------------------------ PCA


def pca_visualize(feature_image: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    """Project an (H, W, F) feature image onto its top-3 principal components.

    Each channel is min-max normalized to [0, 1]; a channel without variance
    (constant image, or rank below 3) is filled with 0.5.  Component signs are
    fixed so the largest-magnitude loading is positive.
    """
    img = np.asarray(feature_image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError("expected an (H, W, F) feature image")
    H, W, F = img.shape
    if F < 3:
        raise SemanticError(f"PCA visualization needs F >= 3, got {F}")
    X = img.reshape(-1, F)
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / max(len(X), 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:3]
    evals, comps = evals[order], evecs[:, order]
    big = np.argmax(np.abs(comps), axis=0)
    comps = comps * np.sign(comps[big, np.arange(3)])
    proj = Xc @ comps
    out = np.full_like(proj, 0.5)
    total = max(float(np.sum(np.maximum(evals, 0))), 0.0)
    for c in range(3):
        lo, hi = proj[:, c].min(), proj[:, c].max()
        if total > 0 and evals[c] > rel_tol * total and hi > lo:
            out[:, c] = (proj[:, c] - lo) / (hi - lo)
    return out.reshape(H, W, 3)
