"""Deterministic toy dynamic scenes with exact ground truth.

Ground-truth images come from :func:`oracle_render`, a deliberately naive
renderer (per-Gaussian loop, long-double accumulation, no culling or skip
threshold) that shares no code with the rasterizer.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .gaussians import SH_C0, SH_C1, SH_C2, SH_C3, Camera, GaussianScene, rgb_to_sh_dc
from .images import read_ppm, read_raw, write_ppm, write_raw

LD = np.longdouble


class SpecError(ValueError):
    pass


@dataclass
class ObjectSpec:
    blobs: int
    center: np.ndarray                       # position at t = 0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    acceleration: np.ndarray = field(default_factory=lambda: np.zeros(3))
    color: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.2, 0.2]))
    extent: float = 0.3
    t_in: float = 0.0
    t_out: float = 1.0

    def center_at(self, t: float) -> np.ndarray:
        return self.center + self.velocity * t + self.acceleration * t * t

    def visible(self, t: float) -> bool:
        return self.t_in <= t <= self.t_out


@dataclass
class SceneSpec:
    frames: int = 24
    width: int = 40
    height: int = 40
    focal: float = 44.0
    seed: int = 0
    feature_dim: int = 16
    background_blobs: int = 300
    bounds: np.ndarray = field(default_factory=lambda: np.array([[-3.0, 3.0], [-2.0, 2.0],
                                                                 [-1.0, 5.0]]))
    camera_start: np.ndarray = field(default_factory=lambda: np.array([-0.3, -0.2, -3.5]))
    camera_end: np.ndarray = field(default_factory=lambda: np.array([0.3, -0.2, -3.5]))
    look_at_start: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 2.0]))
    look_at_end: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 2.0]))
    background_color: np.ndarray = field(default_factory=lambda: np.array([0.05, 0.05, 0.08]))
    teacher_noise: float = 0.0
    objects: list[ObjectSpec] = field(default_factory=list)

    def validate(self) -> None:
        if self.frames < 2:
            raise SpecError("a scene needs at least two frames")
        if self.width < 1 or self.height < 1 or self.focal <= 0:
            raise SpecError("bad image size or focal length")
        b = np.asarray(self.bounds)
        if b.shape != (3, 2) or np.any(b[:, 1] <= b[:, 0]):
            raise SpecError("bounds need positive extent on every axis")
        for k, obj in enumerate(self.objects):
            if obj.blobs < 1 or obj.extent <= 0:
                raise SpecError(f"object{k}: needs blobs >= 1 and extent > 0")
            if not 0.0 <= obj.t_in <= obj.t_out <= 1.0:
                raise SpecError(f"object{k}: appearance window must satisfy 0 <= t_in <= t_out <= 1")
            for t in np.linspace(0.0, 1.0, 101):
                c = obj.center_at(t)
                if np.any(c - obj.extent < b[:, 0]) or np.any(c + obj.extent > b[:, 1]):
                    raise SpecError(f"object{k} leaves the scene bounds at t={t:.2f}")

    def frame_time(self, i: int) -> float:
        return i / (self.frames - 1)

    def camera(self, i: int) -> Camera:
        s = self.frame_time(i)
        pos = (1 - s) * self.camera_start + s * self.camera_end
        tgt = (1 - s) * self.look_at_start + s * self.look_at_end
        return Camera.look_at(pos, tgt, self.width, self.height, self.focal)

    # -- text form -------------------------------------------------------

    _SCALARS = dict(frames=int, width=int, height=int, focal=float, seed=int, feature_dim=int,
                    background_blobs=int, teacher_noise=float)
    _VECTORS = ("camera_start", "camera_end", "look_at_start", "look_at_end", "background_color")
    _OBJ = dict(blobs=int, extent=float, t_in=float, t_out=float)
    _OBJ_VEC = ("center", "velocity", "acceleration", "color")

    def to_text(self) -> str:
        lines = [f"{k} = {getattr(self, k)!r}" for k in self._SCALARS]
        lines.append("bounds = " + ",".join(repr(float(v)) for v in np.ravel(self.bounds)))
        lines += [f"{k} = " + ",".join(repr(float(v)) for v in getattr(self, k))
                  for k in self._VECTORS]
        for i, obj in enumerate(self.objects):
            lines += [f"object{i}.{k} = {getattr(obj, k)!r}" for k in self._OBJ]
            lines += [f"object{i}.{k} = " + ",".join(repr(float(v)) for v in getattr(obj, k))
                      for k in self._OBJ_VEC]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        spec = cls()
        objs: dict[int, dict] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SpecError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                if key in cls._SCALARS:
                    setattr(spec, key, cls._SCALARS[key](val))
                elif key == "bounds":
                    spec.bounds = _vec(val, 6).reshape(3, 2)
                elif key in cls._VECTORS:
                    setattr(spec, key, _vec(val, 3))
                elif key.startswith("object") and "." in key:
                    head, attr = key.split(".", 1)
                    idx = int(head[len("object"):])
                    if attr in cls._OBJ:
                        objs.setdefault(idx, {})[attr] = cls._OBJ[attr](val)
                    elif attr in cls._OBJ_VEC:
                        objs.setdefault(idx, {})[attr] = _vec(val, 3)
                    else:
                        raise SpecError(f"line {lineno}: unknown object key {attr!r}")
                else:
                    raise SpecError(f"line {lineno}: unknown key {key!r}")
            except ValueError as exc:
                if isinstance(exc, SpecError):
                    raise
                raise SpecError(f"line {lineno}: {exc}") from exc
        if sorted(objs) != list(range(len(objs))):
            raise SpecError("object indices must be contiguous from 0")
        for i in range(len(objs)):
            if "blobs" not in objs[i] or "center" not in objs[i]:
                raise SpecError(f"object{i} needs at least blobs and center")
            spec.objects.append(ObjectSpec(**objs[i]))
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_text(Path(path).read_text())


def _vec(text: str, n: int) -> np.ndarray:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != n:
        raise SpecError(f"expected {n} comma-separated numbers, got {len(parts)}")
    return np.array(parts)


def bundled_spec(name: str) -> SceneSpec:
    """Scenes shipped with the package: ``emergent`` and ``static``."""
    path = resources.files("coda4dgs").joinpath("scenes", f"{name}.txt")
    if not path.is_file():
        raise SpecError(f"no bundled scene {name!r} (have: emergent, static)")
    return SceneSpec.from_text(path.read_text())


# ------------------------------------------------------- ground truth scene


@dataclass
class GroundTruth:
    """Canonical blob set; per-frame snapshots translate the objects."""

    spec: SceneSpec
    positions: np.ndarray      # canonical (object blobs relative to their centre)
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    labels: np.ndarray         # 0 background, k + 1 for object k
    codebook: np.ndarray       # (objects + 1, F)

    @property
    def num_labels(self) -> int:
        return len(self.spec.objects) + 1

    def snapshot(self, t: float) -> tuple[GaussianScene, np.ndarray]:
        keep = np.ones(len(self.labels), bool)
        pos = self.positions.copy()
        for k, obj in enumerate(self.spec.objects):
            sel = self.labels == k + 1
            if obj.visible(t):
                pos[sel] += obj.center_at(t)
            else:
                keep[sel] = False
        scene = GaussianScene(pos[keep], self.log_scales[keep], self.rotations[keep],
                              self.opacity_logits[keep], rgb_to_sh_dc(self.colors[keep]),
                              self.codebook[self.labels[keep]])
        return scene, self.labels[keep]

    def init_points(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Every blob at the first frame where it is visible: (points, colors, labels)."""
        pos = self.positions.copy()
        for k, obj in enumerate(self.spec.objects):
            first = math.ceil(obj.t_in * (self.spec.frames - 1) - 1e-9)
            pos[self.labels == k + 1] += obj.center_at(self.spec.frame_time(first))
        return pos, self.colors.copy(), self.labels.copy()


def make_codebook(n: int, dim: int, rng: np.random.Generator, max_cos: float = 0.5) -> np.ndarray:
    for _ in range(10000):
        cb = rng.standard_normal((n, dim))
        cb /= np.linalg.norm(cb, axis=1, keepdims=True)
        gram = cb @ cb.T - np.eye(n)
        if n < 2 or dim < 8 or gram.max() < max_cos:
            return cb
    raise SpecError("could not draw a well-separated codebook; raise feature_dim")


def _random_quaternions(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def build_ground_truth(spec: SceneSpec) -> GroundTruth:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    b = np.asarray(spec.bounds, dtype=np.float64)
    pos, ls, rot, op, col, lab = [], [], [], [], [], []

    # background: a back wall and a floor with smooth colour patterns
    nb = spec.background_blobs
    n_wall = nb - nb // 3
    n_floor = nb - n_wall
    wall_z = b[2, 1] - 0.8
    floor_y = b[1, 1] - 0.6
    wall = np.c_[rng.uniform(b[0, 0] + 0.2, b[0, 1] - 0.2, n_wall),
                 rng.uniform(b[1, 0] + 0.2, floor_y, n_wall),
                 wall_z + rng.uniform(-0.05, 0.05, n_wall)]
    floor = np.c_[rng.uniform(b[0, 0] + 0.2, b[0, 1] - 0.2, n_floor),
                  floor_y + rng.uniform(-0.05, 0.05, n_floor),
                  rng.uniform(b[2, 0] + 1.5, wall_z, n_floor)]
    bg = np.vstack([wall, floor])
    u = (bg - b[:, 0]) / (b[:, 1] - b[:, 0])
    bg_col = np.c_[0.45 + 0.35 * np.sin(2.5 * np.pi * u[:, 0] + 1.0) * np.cos(1.5 * np.pi * u[:, 1]),
                   0.5 + 0.3 * np.cos(2.0 * np.pi * u[:, 1] + 2.0 * u[:, 2]),
                   0.4 + 0.3 * np.sin(1.7 * np.pi * (u[:, 0] + u[:, 2]))]
    area = (b[0, 1] - b[0, 0]) * (b[1, 1] - b[1, 0])
    spacing = math.sqrt(2.0 * area / max(nb, 1))
    pos.append(bg)
    ls.append(np.log(spacing * 0.55) + rng.uniform(-0.25, 0.25, (nb, 3)))
    rot.append(_random_quaternions(rng, nb))
    op.append(np.full((nb, 1), 2.0) + rng.uniform(-0.3, 0.3, (nb, 1)))
    col.append(np.clip(bg_col, 0.02, 0.98))
    lab.append(np.zeros(nb, dtype=np.int64))

    for k, obj in enumerate(spec.objects):
        n = obj.blobs
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = obj.extent * rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0)
        offsets = d * r[:, None] * np.array([0.8, 1.0, 0.8])
        pos.append(offsets)
        ls.append(np.log(obj.extent * 1.1 / n ** (1.0 / 3.0)) + rng.uniform(-0.2, 0.2, (n, 3)))
        rot.append(_random_quaternions(rng, n))
        op.append(np.full((n, 1), 2.5))
        col.append(np.clip(obj.color + rng.normal(0.0, 0.05, (n, 3)), 0.02, 0.98))
        lab.append(np.full(n, k + 1, dtype=np.int64))

    codebook = make_codebook(len(spec.objects) + 1, spec.feature_dim,
                             np.random.default_rng([spec.seed, 7]))
    return GroundTruth(spec, np.vstack(pos), np.vstack(ls), np.vstack(rot), np.vstack(op),
                       np.vstack(col), np.concatenate(lab), codebook)


# --------------------------------------------------------------- oracle


@dataclass
class OracleImage:
    rgb: np.ndarray
    depth: np.ndarray
    accum: np.ndarray
    label_weights: Optional[np.ndarray] = None   # (labels, H, W)


def _oracle_rotation(q) -> np.ndarray:
    q = np.asarray(q, dtype=LD)
    q = q / np.sqrt(np.sum(q * q))
    w, v = q[0], q[1:]
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]], dtype=LD)
    return np.eye(3, dtype=LD) + 2 * w * vx + 2 * vx @ vx


def _oracle_sh(coeffs, d) -> np.ndarray:
    x, y, z = d
    basis = [SH_C0, -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
             SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * z * z - x * x - y * y),
             SH_C2[3] * x * z, SH_C2[4] * (x * x - y * y),
             SH_C3[0] * y * (3 * x * x - y * y), SH_C3[1] * x * y * z,
             SH_C3[2] * y * (4 * z * z - x * x - y * y),
             SH_C3[3] * z * (2 * z * z - 3 * x * x - 3 * y * y),
             SH_C3[4] * x * (4 * z * z - x * x - y * y), SH_C3[5] * z * (x * x - y * y),
             SH_C3[6] * x * (x * x - 3 * y * y)]
    c = np.asarray(coeffs, dtype=LD).reshape(3, 16)
    return np.array([sum(c[ch, k] * basis[k] for k in range(16)) for ch in range(3)], dtype=LD) + LD(0.5)


def oracle_render(scene: GaussianScene, camera: Camera, background=(0.0, 0.0, 0.0),
                  labels: Optional[np.ndarray] = None, num_labels: Optional[int] = None) -> OracleImage:
    """Brute-force reference renderer in extended precision.

    Every Gaussian in front of the near plane is evaluated at every pixel in
    exact depth order; no footprint culling, no skip threshold, no early stop.
    """
    H, W = camera.height, camera.width
    Rw = np.asarray(camera.rotation, dtype=LD)
    tw = np.asarray(camera.translation, dtype=LD)
    center = -Rw.T @ tw
    ys, xs = np.mgrid[0:H, 0:W]
    px = xs.reshape(-1).astype(LD)
    py = ys.reshape(-1).astype(LD)
    P = H * W
    T = np.ones(P, dtype=LD)
    rgb = np.zeros((P, 3), dtype=LD)
    dsum = np.zeros(P, dtype=LD)
    wsum = np.zeros(P, dtype=LD)
    n_lab = num_labels if num_labels is not None else (int(labels.max()) + 1 if labels is not None and len(labels) else 1)
    lab_w = np.zeros((n_lab, P), dtype=LD) if labels is not None else None

    pos = np.asarray(scene.positions, dtype=LD)
    cam_pts = pos @ Rw.T + tw
    order = sorted(range(len(scene)), key=lambda i: (cam_pts[i, 2], i))
    for i in order:
        tx, ty, tz = cam_pts[i]
        if tz <= camera.near:
            continue
        R = _oracle_rotation(scene.rotations[i])
        S = np.diag(np.exp(np.asarray(scene.log_scales[i], dtype=LD)))
        cov = R @ S @ S @ R.T
        J = np.array([[camera.fx / tz, 0, -camera.fx * tx / (tz * tz)],
                      [0, camera.fy / tz, -camera.fy * ty / (tz * tz)]], dtype=LD)
        c2 = J @ Rw @ cov @ Rw.T @ J.T
        a, b, c = c2[0, 0] + LD(0.3), c2[0, 1], c2[1, 1] + LD(0.3)
        det = a * c - b * b
        ia, ib, ic = c / det, -b / det, a / det
        mx = camera.fx * tx / tz + camera.cx
        my = camera.fy * ty / tz + camera.cy
        view = pos[i] - center
        color = _oracle_sh(scene.sh_coeffs[i], view / np.sqrt(np.sum(view * view)))
        color = np.minimum(np.maximum(color, LD(0)), LD(1))
        opacity = LD(1) / (LD(1) + np.exp(-LD(scene.opacity_logits[i, 0])))
        dx, dy = px - mx, py - my
        power = -LD(0.5) * (ia * dx * dx + ic * dy * dy) - ib * dx * dy
        alpha = np.minimum(LD(0.99), opacity * np.exp(power))
        w = alpha * T
        rgb += w[:, None] * color[None, :]
        dsum += w * tz
        wsum += w
        if lab_w is not None:
            lab_w[labels[i]] += w
        T = T * (LD(1) - alpha)
    bg = np.asarray(background, dtype=LD)
    rgb += (LD(1) - wsum)[:, None] * bg[None, :]
    depth = np.where(wsum > LD(0.5), dsum / np.where(wsum > 0, wsum, LD(1)), LD(0))
    return OracleImage(rgb.astype(np.float64).reshape(H, W, 3),
                       depth.astype(np.float64).reshape(H, W),
                       wsum.astype(np.float64).reshape(H, W),
                       None if lab_w is None else lab_w.astype(np.float64).reshape(n_lab, H, W))


# --------------------------------------------------------------- dataset


@dataclass
class Frame:
    index: int
    t: float
    camera: Camera
    rgb: np.ndarray
    depth: np.ndarray
    features: np.ndarray       # (H, W, F) teacher map
    mask: Optional[np.ndarray]  # (H, W) instance ids, 0 = background


@dataclass
class Dataset:
    frames: list[Frame]
    background: np.ndarray
    codebook: np.ndarray
    split_mode: str = "nvs"
    ground_truth: Optional[GroundTruth] = None

    def __post_init__(self):
        ts = [f.t for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("frame times must be strictly increasing")
        if self.split_mode not in ("nvs", "reconstruction"):
            raise ValueError(f"unknown split mode {self.split_mode!r}")

    @property
    def test_indices(self) -> list[int]:
        if self.split_mode == "nvs":
            return [i for i in range(len(self.frames)) if i % 10 == 0]
        return list(range(len(self.frames)))

    @property
    def train_indices(self) -> list[int]:
        if self.split_mode == "nvs":
            return [i for i in range(len(self.frames)) if i % 10 != 0]
        return list(range(len(self.frames)))

    @property
    def feature_dim(self) -> int:
        return self.codebook.shape[1]

    def with_split(self, mode: str) -> "Dataset":
        return Dataset(self.frames, self.background, self.codebook, mode, self.ground_truth)


def teacher_features(gt: GroundTruth, label_weights: np.ndarray,
                     rng: Optional[np.random.Generator] = None, noise: float = 0.0):
    """Codebook vector of the object holding > 0.5 compositing weight, else background.

    Returns (feature map (H, W, F), instance mask (H, W)).
    """
    obj_w = label_weights[1:]
    mask = np.zeros(label_weights.shape[1:], dtype=np.int64)
    if obj_w.shape[0]:
        best = np.argmax(obj_w, axis=0)
        strong = np.take_along_axis(obj_w, best[None], axis=0)[0] > 0.5
        mask = np.where(strong, best + 1, 0)
    feats = gt.codebook[mask]
    if noise > 0 and rng is not None:
        feats = feats + rng.normal(0.0, noise, feats.shape)
        feats /= np.linalg.norm(feats, axis=-1, keepdims=True)
    return feats, mask


def generate_dataset(spec: SceneSpec, split_mode: str = "nvs") -> Dataset:
    gt = build_ground_truth(spec)
    rng = np.random.default_rng([spec.seed, 11])
    frames = []
    for i in range(spec.frames):
        t = spec.frame_time(i)
        cam = spec.camera(i)
        scene, labels = gt.snapshot(t)
        img = oracle_render(scene, cam, spec.background_color, labels, gt.num_labels)
        feats, mask = teacher_features(gt, img.label_weights, rng, spec.teacher_noise)
        frames.append(Frame(i, t, cam, img.rgb, img.depth, feats, mask))
    return Dataset(frames, np.asarray(spec.background_color, dtype=np.float64), gt.codebook,
                   split_mode, gt)


# ------------------------------------------------------------ disk layout

CAMERA_COLUMNS = ["frame", "t", "fx", "fy", "cx", "cy", "width", "height", "near", "far"] + \
    [f"w{r}{c}" for r in range(4) for c in range(4)]


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if ds.ground_truth is not None:
        (out / "spec.txt").write_text(ds.ground_truth.spec.to_text())
    with open(out / "cameras.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CAMERA_COLUMNS)
        for f in ds.frames:
            c = f.camera
            w.writerow([f.index, repr(f.t), repr(c.fx), repr(c.fy), repr(c.cx), repr(c.cy),
                        c.width, c.height, repr(c.near), repr(c.far)]
                       + [repr(float(v)) for v in c.world_to_camera.ravel()])
    for f in ds.frames:
        write_ppm(out / f"frame_{f.index:04d}.ppm", f.rgb)
        write_raw(out / f"depth_{f.index:04d}.raw", f.depth)
        write_raw(out / f"feat_{f.index:04d}.raw", f.features)
        if f.mask is not None:
            write_raw(out / f"mask_{f.index:04d}.raw", f.mask.astype(np.float64))


def load_dataset(in_dir, split_mode: str = "nvs") -> Dataset:
    """Images from disk; codebook and ground-truth metadata regenerated from ``spec.txt``."""
    d = Path(in_dir)
    spec = SceneSpec.load(d / "spec.txt")
    gt = build_ground_truth(spec)
    frames = []
    with open(d / "cameras.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            i = int(row["frame"])
            W = np.array([float(row[f"w{r}{c}"]) for r in range(4) for c in range(4)]).reshape(4, 4)
            cam = Camera(W, float(row["fx"]), float(row["fy"]), float(row["cx"]), float(row["cy"]),
                         int(row["width"]), int(row["height"]), float(row["near"]), float(row["far"]))
            mask_path = d / f"mask_{i:04d}.raw"
            mask = read_raw(mask_path)[:, :, 0].astype(np.int64) if mask_path.exists() else None
            frames.append(Frame(i, float(row["t"]), cam, read_ppm(d / f"frame_{i:04d}.ppm"),
                                read_raw(d / f"depth_{i:04d}.raw")[:, :, 0].astype(np.float64),
                                read_raw(d / f"feat_{i:04d}.raw").astype(np.float64), mask))
    return Dataset(frames, np.asarray(spec.background_color, dtype=np.float64), gt.codebook,
                   split_mode, gt)


def directory_crcs(path) -> dict[str, int]:
    return {p.name: zlib.crc32(p.read_bytes()) for p in sorted(Path(path).iterdir()) if p.is_file()}
