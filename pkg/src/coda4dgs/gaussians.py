"""Gaussian scene representation, cameras, covariance and SH colour."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .numeric import FormatError, sigmoid

SH_DEGREE = 3
SH_BASIS = (SH_DEGREE + 1) ** 2  # 16
SH_COEFFS = 3 * SH_BASIS  # 48, channel-major: [r0..r15, g0..g15, b0..b15]
LOWPASS = 0.3
INIT_OPACITY = 0.1
SINGLE_POINT_SCALE = 0.01

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


class InvalidRotationError(ValueError):
    pass


class EmptySceneError(ValueError):
    pass


@dataclass
class GaussianScene:
    positions: np.ndarray        # (N, 3)
    log_scales: np.ndarray       # (N, 3)
    rotations: np.ndarray        # (N, 4) as (w, x, y, z)
    opacity_logits: np.ndarray   # (N, 1)
    sh_coeffs: np.ndarray        # (N, 48)
    context_features: np.ndarray  # (N, F)

    ARRAYS = ("positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs",
              "context_features")

    def __post_init__(self):
        for name in self.ARRAYS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.positions.shape[0]
        widths = dict(positions=3, log_scales=3, rotations=4, opacity_logits=1,
                      sh_coeffs=SH_COEFFS)
        for name, w in widths.items():
            a = getattr(self, name)
            if a.shape != (n, w):
                raise ValueError(f"{name} has shape {a.shape}, expected ({n}, {w})")
        if self.context_features.ndim != 2 or self.context_features.shape[0] != n:
            raise ValueError(f"context_features has shape {self.context_features.shape}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.context_features.shape[1]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits[:, 0])

    def normalized_features(self) -> np.ndarray:
        return normalize_rows(self.context_features)[0]

    def subset(self, idx) -> "GaussianScene":
        return GaussianScene(*(getattr(self, n)[idx] for n in self.ARRAYS))

    def copy(self) -> "GaussianScene":
        return GaussianScene(*(getattr(self, n).copy() for n in self.ARRAYS))

    def with_geometry(self, positions, log_scales, rotations) -> "GaussianScene":
        return replace(self, positions=positions, log_scales=log_scales, rotations=rotations)

    @staticmethod
    def concatenate(scenes) -> "GaussianScene":
        return GaussianScene(*(np.concatenate([getattr(s, n) for s in scenes], axis=0)
                               for n in GaussianScene.ARRAYS))

    @classmethod
    def empty(cls, feature_dim: int) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 1)),
                   np.zeros((0, SH_COEFFS)), np.zeros((0, feature_dim)))


@dataclass
class SceneGrad:
    """Gradient with the same layout as :class:`GaussianScene`."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    context_features: np.ndarray

    @classmethod
    def zeros_like(cls, scene: GaussianScene) -> "SceneGrad":
        return cls(*(np.zeros_like(getattr(scene, n)) for n in GaussianScene.ARRAYS))

    def __iadd__(self, other: "SceneGrad") -> "SceneGrad":
        for f in fields(self):
            getattr(self, f.name)[...] += getattr(other, f.name)
        return self


def normalize_rows(v: np.ndarray, eps: float = 1e-12):
    norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    return v / np.maximum(norm, eps), norm


def normalize_rows_backward(v: np.ndarray, norm: np.ndarray, grad_out: np.ndarray,
                            eps: float = 1e-12) -> np.ndarray:
    n = np.maximum(norm, eps)
    u = v / n
    g = (grad_out - u * np.sum(u * grad_out, axis=-1, keepdims=True)) / n
    return np.where(norm > eps, g, grad_out / eps)


# ------------------------------------------------------------- camera


@dataclass
class Camera:
    world_to_camera: np.ndarray  # 4x4 rigid, OpenCV axes (x right, y down, z forward)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        W = np.asarray(self.world_to_camera, dtype=np.float64)
        self.world_to_camera = W
        R = W[:3, :3]
        if W.shape != (4, 4) or not np.allclose(W[3], [0, 0, 0, 1], atol=1e-12):
            raise ValueError("world_to_camera must be a 4x4 homogeneous transform")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("world_to_camera rotation is not orthonormal with det +1")
        if not 0 < self.near < self.far:
            raise ValueError("camera needs 0 < near < far")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def view_matrix(self) -> np.ndarray:
        """3x4 pixel projection ``K [R | t]``."""
        return self.intrinsics @ self.world_to_camera[:3]

    @classmethod
    def look_at(cls, position, target, width: int, height: int, focal: float,
                up=(0.0, -1.0, 0.0), near: float = 0.05, far: float = 100.0) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])  # rows: camera axes in world coords
        W = np.eye(4)
        W[:3, :3] = R
        W[:3, 3] = -R @ position
        return cls(W, focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height,
                   near, far)

    def rotated(self, yaw_deg: float = 0.0, pitch_deg: float = 0.0) -> "Camera":
        """Same centre, orientation offset by yaw (about camera y) then pitch (camera x)."""
        a, b = np.radians(yaw_deg), np.radians(pitch_deg)
        ry = np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])
        rx = np.array([[1, 0, 0], [0, np.cos(b), -np.sin(b)], [0, np.sin(b), np.cos(b)]])
        cam_to_world = self.rotation.T @ ry @ rx
        R = cam_to_world.T
        W = np.eye(4)
        W[:3, :3] = R
        W[:3, 3] = -R @ self.center
        return replace(self, world_to_camera=W)


# ------------------------------------------------------- covariance


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (N, 3, 3) from (N, 4) quaternions; normalizes first."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    norm = np.linalg.norm(q, axis=1)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise InvalidRotationError("quaternion with zero or non-finite norm")
    w, x, y, z = (q / norm[:, None]).T
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quaternion_to_matrix_backward(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw (unnormalized) quaternion."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn.T
    G = gR
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2]
              - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1]
              - w * G[:, 1, 2] + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    gy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0]
              + z * G[:, 1, 2] - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    gz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0]
              - 2 * z * G[:, 1, 1] + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    gqn = np.stack([gw, gx, gy, gz], axis=1)
    return (gqn - qn * np.sum(qn * gqn, axis=1, keepdims=True)) / norm


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([aw * bw - ax * bx - ay * by - az * bz,
                     aw * bx + ax * bw + ay * bz - az * by,
                     aw * by - ax * bz + ay * bw + az * bx,
                     aw * bz + ax * by - ay * bx + az * bw], axis=-1)


def build_covariance(log_scale, q) -> np.ndarray:
    """``R S S^T R^T`` for one Gaussian (3-vector, 4-vector) or a batch."""
    ls = np.asarray(log_scale, dtype=np.float64)
    single = ls.ndim == 1
    ls = np.atleast_2d(ls)
    R = quaternion_to_matrix(np.atleast_2d(q))
    M = R * np.exp(ls)[:, None, :]
    cov = M @ np.swapaxes(M, 1, 2)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return cov[0] if single else cov


def build_covariance_backward(log_scale, q, g_cov):
    """Gradients w.r.t. (log_scale, q) given dL/dSigma (N, 3, 3)."""
    s = np.exp(log_scale)
    R = quaternion_to_matrix(q)
    M = R * s[:, None, :]
    G = 0.5 * (g_cov + np.swapaxes(g_cov, 1, 2))
    gM = 2.0 * G @ M
    g_s = np.sum(gM * R, axis=1)
    gR = gM * s[:, None, :]
    return g_s * s, quaternion_to_matrix_backward(q, gR)


def projection_jacobian(mean_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    tx, ty, tz = np.atleast_2d(mean_cam).T
    J = np.zeros((tx.shape[0], 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * tx / tz**2
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / tz**2
    return J


def project_covariance(cov: np.ndarray, cam: Camera, mean_cam: np.ndarray) -> np.ndarray:
    """2D screen covariance ``J W Sigma W^T J^T`` plus the low-pass floor."""
    single = np.asarray(cov).ndim == 2
    cov = np.asarray(cov, dtype=np.float64).reshape(-1, 3, 3)
    mean_cam = np.atleast_2d(mean_cam)
    if np.any(mean_cam[:, 2] <= cam.near):
        raise ValueError("point is not in front of the near plane")
    T = projection_jacobian(mean_cam, cam.fx, cam.fy) @ cam.rotation
    out = T @ cov @ np.swapaxes(T, 1, 2) + LOWPASS * np.eye(2)
    return out[0] if single else out


# ------------------------------------------------------ spherical harmonics


def sh_basis(d: np.ndarray) -> np.ndarray:
    """Real SH basis values up to degree 3 for unit directions (N, 3) -> (N, 16)."""
    x, y, z = np.atleast_2d(d).T
    xx, yy, zz = x * x, y * y, z * z
    return np.stack([
        np.full_like(x, SH_C0),
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
        SH_C2[3] * x * z, SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
        SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3 * yy),
    ], axis=1)


def sh_basis_jacobian(d: np.ndarray) -> np.ndarray:
    """d(basis)/d(direction) as (N, 16, 3)."""
    x, y, z = np.atleast_2d(d).T
    xx, yy, zz = x * x, y * y, z * z
    o = np.zeros_like(x)
    rows = [
        (o, o, o),
        (o, -SH_C1 + o, o), (o, o, SH_C1 + o), (-SH_C1 + o, o, o),
        (SH_C2[0] * y, SH_C2[0] * x, o),
        (o, SH_C2[1] * z, SH_C2[1] * y),
        (-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z),
        (SH_C2[3] * z, o, SH_C2[3] * x),
        (2 * SH_C2[4] * x, -2 * SH_C2[4] * y, o),
        (SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy), o),
        (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
        (SH_C3[2] * -2 * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), SH_C3[2] * 8 * y * z),
        (SH_C3[3] * -6 * x * z, SH_C3[3] * -6 * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)),
        (SH_C3[4] * (4 * zz - 3 * xx - yy), SH_C3[4] * -2 * x * y, SH_C3[4] * 8 * x * z),
        (SH_C3[5] * 2 * x * z, SH_C3[5] * -2 * y * z, SH_C3[5] * (xx - yy)),
        (SH_C3[6] * (3 * xx - 3 * yy), SH_C3[6] * -6 * x * y, o),
    ]
    return np.stack([np.stack(r, axis=1) for r in rows], axis=1)


def evaluate_sh(coeffs, view_dir, offset: bool = True) -> np.ndarray:
    """Unclamped RGB from degree-3 SH coefficients; clamping happens at render time.

    Works on a single 48-vector / 3-vector or on batches (N, 48) / (N, 3).
    """
    c = np.asarray(coeffs, dtype=np.float64)
    single = c.ndim == 1
    c = np.atleast_2d(c).reshape(-1, 3, SH_BASIS)
    Y = sh_basis(np.atleast_2d(view_dir))
    rgb = np.einsum("ncb,nb->nc", c, Y)
    if offset:
        rgb = rgb + 0.5
    return rgb[0] if single else rgb


def rgb_to_sh_dc(colors: np.ndarray) -> np.ndarray:
    colors = np.atleast_2d(colors)
    sh = np.zeros((colors.shape[0], SH_COEFFS))
    sh[:, 0::SH_BASIS] = (colors - 0.5) / SH_C0
    return sh


# --------------------------------------------------------------- init


def init_from_points(points, colors, feature_dim: int, seed: int = 0) -> GaussianScene:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    m = points.shape[0] if points.size else 0
    if m == 0:
        raise EmptySceneError("cannot initialize a scene from zero points")
    if m == 1:
        mean_dist = np.array([SINGLE_POINT_SCALE])
    else:
        k = min(3, m - 1)
        dist, _ = cKDTree(points).query(points, k=k + 1)
        mean_dist = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    log_scales = np.repeat(np.log(mean_dist)[:, None], 3, axis=1)
    rotations = np.zeros((m, 4))
    rotations[:, 0] = 1.0
    opacity = np.full((m, 1), np.log(INIT_OPACITY / (1 - INIT_OPACITY)))
    rng = np.random.default_rng(seed)
    feats = normalize_rows(rng.standard_normal((m, feature_dim)))[0]
    return GaussianScene(points.copy(), log_scales, rotations, opacity, rgb_to_sh_dc(colors), feats)


# --------------------------------------------------------------- file I/O

SCENE_MAGIC = b"C4DG"
SCENE_VERSION = 1


def scene_to_bytes(scene: GaussianScene) -> bytes:
    payload = [struct.pack("<IQQ", SCENE_VERSION, len(scene), scene.feature_dim)]
    for name in GaussianScene.ARRAYS:
        payload.append(np.ascontiguousarray(getattr(scene, name), dtype="<f8").tobytes())
    body = b"".join(payload)
    return SCENE_MAGIC + body + struct.pack("<I", zlib.crc32(body))


def scene_from_bytes(data: bytes, base_offset: int = 0) -> tuple[GaussianScene, int]:
    """Parse one scene record; returns the scene and the number of bytes consumed."""
    if data[:4] != SCENE_MAGIC:
        raise FormatError(f"bad scene magic {data[:4]!r}", base_offset)
    if len(data) < 24:
        raise FormatError("truncated scene header", base_offset + len(data))
    version, n, f = struct.unpack("<IQQ", data[4:24])
    if version != SCENE_VERSION:
        raise FormatError(f"unsupported scene version {version}", base_offset + 4)
    widths = [3, 3, 4, 1, SH_COEFFS, f]
    end = 24 + 8 * n * sum(widths)
    if len(data) < end + 4:
        raise FormatError(f"truncated scene payload: need {end + 4} bytes, have {len(data)}",
                          base_offset + len(data))
    (crc,) = struct.unpack("<I", data[end:end + 4])
    if crc != zlib.crc32(data[4:end]):
        raise FormatError("scene checksum mismatch", base_offset + end)
    arrays, pos = [], 24
    for w in widths:
        nbytes = 8 * n * w
        arrays.append(np.frombuffer(data[pos:pos + nbytes], dtype="<f8")
                      .astype(np.float64).reshape(n, w))
        pos += nbytes
    return GaussianScene(*arrays), end + 4


def save_scene(scene: GaussianScene, path) -> None:
    Path(path).write_bytes(scene_to_bytes(scene))


def load_scene(path) -> GaussianScene:
    data = Path(path).read_bytes()
    scene, used = scene_from_bytes(data)
    if used != len(data):
        raise FormatError("trailing bytes after scene record", used)
    return scene
