"""Two-phase training (static fit, then deformation + DCN), checkpoints and evaluation."""

from __future__ import annotations

import dataclasses
import io
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .awareness import AWARENESS_PARTS, DcnParams
from .deformation import DEF_WIDTH, HexPlaneField
from .gaussians import GaussianScene, init_from_points, scene_from_bytes, scene_to_bytes
from .losses import TERMS, LossReport, LossWeights, depth_grad, depth_loss, depth_mask, \
    dssim_grad, dssim_loss, feature_cosine_grad, feature_cosine_loss, l1_grad, l1_loss, \
    masked_psnr, masked_ssim, psnr, ssim, total_loss, tv_backward, tv_loss
from .numeric import AdamState, FormatError, ParamBlock, adam_step, exponential_lr, pack_blocks, \
    unpack_blocks
from .pipeline import SCENE_BLOCKS, Model, scene_blocks
from .synthetic import Dataset

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    def __init__(self, term: str, step: int, value: float):
        super().__init__(f"loss term {term!r} became {value} at step {step}")
        self.term = term
        self.step = step


@dataclass
class TrainingConfig:
    total_steps: int = 3000
    static_phase_steps: int = 1200
    lr_start: float = 1.6e-3
    lr_end: float = 1.6e-4
    w_rgb: float = 1.0
    w_dssim: float = 0.2
    w_tv: float = 1.0
    w_depth: float = 0.5
    w_feature: float = 1.0
    feature_dim: int = 16
    time_dim: int = 64
    hex_resolutions: tuple = (16, 32)
    hex_channels: int = 8
    latent_width: int = 64
    decoder_width: int = 64
    dcn_enabled: bool = True
    dcn_inputs: tuple = AWARENESS_PARTS
    prune_interval: int = 500
    prune_threshold: float = 0.005
    seed: int = 0
    num_frames: int = 2
    background: tuple = (0.0, 0.0, 0.0)
    bounds: tuple = ()          # x0,x1,y0,y1,z0,z1; empty means derive from the points
    # optional per-group learning-rate multipliers; all 1 means one shared schedule
    lr_scale_geometry: float = 1.0
    lr_scale_opacity: float = 1.0
    lr_scale_color: float = 1.0
    lr_scale_features: float = 1.0
    lr_scale_field: float = 1.0
    lr_scale_dcn: float = 1.0

    def __post_init__(self):
        self.hex_resolutions = tuple(int(v) for v in self.hex_resolutions)
        self.dcn_inputs = tuple(self.dcn_inputs)
        self.background = tuple(float(v) for v in self.background)
        self.bounds = tuple(float(v) for v in self.bounds)
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigError("need 0 < lr_end <= lr_start")
        if self.total_steps < 0 or not 0 <= self.static_phase_steps <= self.total_steps:
            raise ConfigError("need 0 <= static_phase_steps <= total_steps")
        if self.feature_dim < 1 or self.time_dim < 2 or self.time_dim % 2:
            raise ConfigError("feature_dim must be >= 1 and time_dim even and >= 2")
        if any(r < 2 for r in self.hex_resolutions) or not self.hex_resolutions:
            raise ConfigError("hexplane resolutions must be >= 2")
        if self.prune_interval < 1:
            raise ConfigError("prune_interval must be >= 1")
        bad = set(self.dcn_inputs) - set(AWARENESS_PARTS)
        if bad:
            raise ConfigError(f"unknown awareness components {sorted(bad)}")
        if len(self.background) != 3:
            raise ConfigError("background needs three values")
        if self.bounds and len(self.bounds) != 6:
            raise ConfigError("bounds needs six values")
        if min(self.lr_scales.values()) <= 0:
            raise ConfigError("learning-rate multipliers must be positive")
        try:
            LossWeights(self.w_rgb, self.w_dssim, self.w_tv, self.w_depth, self.w_feature)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def lr_scales(self) -> dict[str, float]:
        return dict(geometry=self.lr_scale_geometry, opacity=self.lr_scale_opacity,
                    color=self.lr_scale_color, features=self.lr_scale_features,
                    field=self.lr_scale_field, dcn=self.lr_scale_dcn)

    def lr_scale_for(self, block_name: str) -> float:
        return self.lr_scales[param_group(block_name)]

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_rgb, self.w_dssim, self.w_tv, self.w_depth, self.w_feature)

    # -- text form ---------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, tuple):
                s = ",".join(repr(x) if not isinstance(x, str) else x for x in v)
            else:
                s = repr(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainingConfig":
        types = {f.name: type(f.default) if f.default is not dataclasses.MISSING else None
                 for f in dataclasses.fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            kw[key] = _parse_value(key, types[key], val, lineno)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def load(cls, path, **overrides) -> "TrainingConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


_GAUSSIAN_GROUPS = dict(positions="geometry", log_scales="geometry", rotations="geometry",
                       opacity_logits="opacity", sh_coeffs="color",
                       context_features="features")


def param_group(block_name: str) -> str:
    head, _, tail = block_name.partition("/")
    if head == "gaussians":
        return _GAUSSIAN_GROUPS[tail]
    if head == "dcn":
        return "dcn"
    return "field"


def _parse_value(key, typ, val, lineno):
    try:
        if typ is bool:
            if val.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"not a boolean: {val!r}")
            return val.lower() in ("true", "1")
        if typ is int:
            return int(val)
        if typ is float:
            return float(val)
        if typ is tuple:
            parts = [p.strip() for p in val.split(",") if p.strip()]
            if key == "dcn_inputs":
                return tuple(parts)
            if key == "hex_resolutions":
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    raise ConfigError(f"line {lineno}: unsupported key {key!r}")


# ------------------------------------------------------------ model setup


def field_bounds(config: TrainingConfig, points: np.ndarray) -> np.ndarray:
    if config.bounds:
        return np.asarray(config.bounds, dtype=np.float64).reshape(3, 2)
    lo, hi = points.min(axis=0), points.max(axis=0)
    pad = 0.1 * (hi - lo) + 0.25
    return np.stack([lo - pad, hi + pad], axis=1)


def build_model(config: TrainingConfig, scene: GaussianScene, bounds) -> Model:
    if scene.feature_dim != config.feature_dim:
        raise ConfigError(f"scene has feature_dim {scene.feature_dim}, config says "
                          f"{config.feature_dim}")
    hex_field = HexPlaneField.create(bounds, config.hex_resolutions, config.hex_channels,
                                     config.latent_width, config.latent_width,
                                     config.decoder_width,
                                     seed=int(np.random.SeedSequence([config.seed, 1])
                                              .generate_state(1)[0]))
    dcn = DcnParams.create(config.time_dim + DEF_WIDTH + config.feature_dim,
                           seed=int(np.random.SeedSequence([config.seed, 2])
                                    .generate_state(1)[0]))
    mask = dict(time="time" in config.dcn_inputs, def_="def" in config.dcn_inputs,
                con="con" in config.dcn_inputs)
    return Model(scene_blocks(scene), hex_field, dcn, config.time_dim, config.dcn_enabled, mask,
                 np.asarray(config.background, dtype=np.float64))


def initial_scene(config: TrainingConfig, dataset: Dataset) -> GaussianScene:
    if dataset.ground_truth is None:
        raise ValueError("dataset carries no ground-truth points to initialize from")
    pts, cols, _ = dataset.ground_truth.init_points()
    return init_from_points(pts, cols, config.feature_dim, seed=config.seed)


# --------------------------------------------------------------- trainer


LOG_HEADER = "step,lr," + ",".join(TERMS) + ",total\n"


@dataclass
class StepResult:
    step: int
    lr: float
    report: LossReport
    phase: int


@dataclass
class Trainer:
    config: TrainingConfig
    dataset: Dataset
    model: Model
    step: int = 0
    adam: dict[str, AdamState] = field(default_factory=dict)
    log_lines: list[str] = field(default_factory=list)

    @classmethod
    def create(cls, config: TrainingConfig, dataset: Dataset,
               scene: GaussianScene | None = None) -> "Trainer":
        if not dataset.frames:
            raise ValueError("dataset has no frames")
        if dataset.feature_dim != config.feature_dim:
            raise ConfigError(f"dataset teacher features have dim {dataset.feature_dim}, "
                              f"config says {config.feature_dim}")
        config = dataclasses.replace(config, num_frames=len(dataset.frames),
                                     background=tuple(float(v) for v in dataset.background))
        scene = initial_scene(config, dataset) if scene is None else scene
        bounds = field_bounds(config, scene.positions)
        config = dataclasses.replace(config, bounds=tuple(bounds.ravel()))
        model = build_model(config, scene, bounds)
        return cls(config, dataset, model)

    def state_for(self, block: ParamBlock) -> AdamState:
        st = self.adam.get(block.name)
        if st is None:
            st = self.adam[block.name] = AdamState.for_block(block)
        return st

    @property
    def finished(self) -> bool:
        return self.step >= self.config.total_steps

    def phase_of(self, step: int) -> int:
        return 1 if step < self.config.static_phase_steps else 2

    def train_step(self) -> StepResult:
        cfg = self.config
        step = self.step
        rng = np.random.default_rng([cfg.seed, 3, step])
        train_idx = self.dataset.train_indices
        frame = self.dataset.frames[train_idx[int(rng.integers(len(train_idx)))]]
        phase = self.phase_of(step)
        dynamic = phase == 2
        m = self.model
        out, cache = m.forward(frame.camera, frame.t, frame.index, dynamic=dynamic)

        w = cfg.weights
        dmask = depth_mask(out.accum, frame.depth)
        terms = {
            "rgb": l1_loss(out.rgb, frame.rgb),
            "dssim": dssim_loss(out.rgb, frame.rgb),
            "tv": tv_loss(m.field) if dynamic else 0.0,
            "depth": depth_loss(out.depth, frame.depth, dmask),
            "feature": feature_cosine_loss(out.feature, frame.features),
        }
        report = total_loss(terms, w)
        for name in TERMS:
            if not math.isfinite(report.terms[name]):
                raise DivergenceError(name, step, report.terms[name])
        if not math.isfinite(report.total):
            raise DivergenceError("total", step, report.total)

        g_rgb = w.rgb * l1_grad(out.rgb, frame.rgb) + w.dssim * dssim_grad(out.rgb, frame.rgb)
        g_depth = w.depth * depth_grad(out.depth, frame.depth, dmask)
        g_feat = w.feature * feature_cosine_grad(out.feature, frame.features)
        m.zero_grad()
        m.backward(out, cache, g_rgb, g_depth, g_feat)
        if dynamic and w.tv > 0:
            tv_backward(m.field, w.tv)

        lr = exponential_lr(step, cfg.total_steps, cfg.lr_start, cfg.lr_end)
        blocks = m.blocks() if dynamic else m.gaussian_blocks()
        for b in blocks:
            adam_step(b, self.state_for(b), lr * cfg.lr_scale_for(b.name))
        self.step += 1
        self.log_lines.append(f"{step},{lr!r}," + ",".join(repr(report.terms[k]) for k in TERMS)
                              + f",{report.total!r}\n")
        if self.step % cfg.prune_interval == 0 and self.step < cfg.total_steps:
            self.prune()
        return StepResult(step, lr, report, phase)

    def prune(self) -> int:
        """Drop Gaussians whose opacity fell below the threshold; returns how many."""
        op = self.model.scene.opacities
        keep = np.nonzero(op >= self.config.prune_threshold)[0]
        dropped = len(op) - len(keep)
        if dropped == 0 or len(keep) == 0:
            return 0
        self.model.keep(keep)
        for name in SCENE_BLOCKS:
            st = self.adam.get(f"gaussians/{name}")
            if st is not None:
                st.first_moment = st.first_moment[keep].copy()
                st.second_moment = st.second_moment[keep].copy()
        log.info("step %d: pruned %d Gaussians, %d left", self.step, dropped, len(keep))
        return dropped

    def run(self, steps: int | None = None,
            callback: Optional[Callable[[StepResult], None]] = None) -> "Trainer":
        end = self.config.total_steps if steps is None else min(self.config.total_steps,
                                                               self.step + steps)
        while self.step < end:
            res = self.train_step()
            if callback is not None:
                callback(res)
        return self

    def loss_log(self) -> str:
        return LOG_HEADER + "".join(self.log_lines)

    def write_loss_log(self, path) -> None:
        Path(path).write_text(self.loss_log())

    # -- checkpoints -------------------------------------------------

    def save(self, path) -> None:
        Path(path).write_bytes(checkpoint_to_bytes(self.config, self.model, self.step, self.adam))

    @classmethod
    def resume(cls, path, dataset: Dataset, config: TrainingConfig | None = None) -> "Trainer":
        ck = load_checkpoint(path, expect=config)
        if dataset.feature_dim != ck.config.feature_dim:
            raise ConfigError("dataset feature_dim differs from the checkpoint's")
        return cls(ck.config, dataset, ck.model, ck.step, ck.adam)


def train(config: TrainingConfig, dataset: Dataset, scene: GaussianScene | None = None,
          checkpoint_path=None, log_path=None) -> Trainer:
    tr = Trainer.create(config, dataset, scene).run()
    if checkpoint_path is not None:
        tr.save(checkpoint_path)
    if log_path is not None:
        tr.write_loss_log(log_path)
    return tr


# ----------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"C4DK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: TrainingConfig
    model: Model
    step: int
    adam: dict[str, AdamState]


def checkpoint_to_bytes(config: TrainingConfig, model: Model, step: int,
                        adam: dict[str, AdamState]) -> bytes:
    cfg = config.to_text().encode()
    blocks = [ParamBlock("hexplane/bounds", model.field.bounds)]
    blocks += [ParamBlock(b.name, b.values) for b in model.network_blocks()]
    for name in sorted(adam):
        st = adam[name]
        blocks.append(ParamBlock(f"adam/m/{name}", st.first_moment))
        blocks.append(ParamBlock(f"adam/v/{name}", st.second_moment))
        blocks.append(ParamBlock(f"adam/k/{name}", np.array([float(st.step_count)])))
    body = b"".join([struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
                     struct.pack("<Q", step), scene_to_bytes(model.scene), pack_blocks(blocks)])
    return CHECKPOINT_MAGIC + body + struct.pack("<I", zlib.crc32(body))


def checkpoint_from_bytes(data: bytes, expect: TrainingConfig | None = None) -> Checkpoint:
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}", 0)
    if len(data) < 16:
        raise FormatError("truncated checkpoint header", len(data))
    version, n_cfg = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (crc,) = struct.unpack("<I", data[-4:])
    if crc != zlib.crc32(data[4:-4]):
        raise FormatError("checkpoint checksum mismatch (truncated or corrupted)", len(data) - 4)
    pos = 12
    config = TrainingConfig.from_text(data[pos:pos + n_cfg].decode())
    pos += n_cfg
    (step,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    scene, used = scene_from_bytes(data[pos:-4], pos)
    pos += used
    blocks, used = unpack_blocks(data[pos:-4], pos)
    if pos + used != len(data) - 4:
        raise FormatError("trailing bytes in checkpoint", pos + used)
    if expect is not None and expect.feature_dim != config.feature_dim:
        raise ConfigError(f"checkpoint feature_dim {config.feature_dim} conflicts with "
                          f"configured {expect.feature_dim}")
    if scene.feature_dim != config.feature_dim:
        raise ConfigError("scene feature_dim disagrees with the stored config")
    by_name = {b.name: b.values for b in blocks}
    model = build_model(config, scene, by_name["hexplane/bounds"])
    for b in model.network_blocks():
        if b.name not in by_name or by_name[b.name].shape != b.shape:
            raise FormatError(f"checkpoint block {b.name!r} missing or mis-shaped", pos)
        b.values = by_name[b.name].copy()
    adam = {}
    for name in by_name:
        if name.startswith("adam/m/"):
            key = name[len("adam/m/"):]
            adam[key] = AdamState(by_name[name].copy(), by_name[f"adam/v/{key}"].copy(),
                                  int(by_name[f"adam/k/{key}"][0]))
    return Checkpoint(config, model, step, adam)


def load_checkpoint(path, expect: TrainingConfig | None = None) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes(), expect)


def save_checkpoint(path, trainer: Trainer) -> None:
    trainer.save(path)


# ------------------------------------------------------------- evaluate

EVAL_COLUMNS = ("frame", "t", "psnr", "ssim", "psnr_star", "ssim_star")


@dataclass
class EvalRow:
    frame: int
    t: float
    psnr: float
    ssim: float
    psnr_star: Optional[float] = None
    ssim_star: Optional[float] = None


@dataclass
class EvalTable:
    split: str
    rows: list[EvalRow]

    def mean(self, key: str) -> float:
        vals = [getattr(r, key) for r in self.rows if getattr(r, key) is not None]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(EVAL_COLUMNS) + "\n")
        for r in self.rows:
            vals = [r.frame, r.t, r.psnr, r.ssim, r.psnr_star, r.ssim_star]
            buf.write(",".join("" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))
                               for v in vals) + "\n")
        return buf.getvalue()


def frame_phase(config: TrainingConfig, step: int) -> bool:
    """Whether a model trained for ``step`` steps renders through the deformation path."""
    return step > config.static_phase_steps


def render_frame(model: Model, frame, dynamic: bool):
    return model.forward(frame.camera, frame.t, frame.index, dynamic=dynamic)[0]


def evaluate(checkpoint, dataset: Dataset, split: str = "nvs") -> EvalTable:
    """Per-frame PSNR/SSIM plus starred metrics over dynamic-object pixels.

    ``checkpoint`` may be a path, a :class:`Checkpoint` or a :class:`Trainer`.
    """
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    ds = dataset.with_split(split)
    dynamic = frame_phase(checkpoint.config, checkpoint.step)
    rows = []
    warned = False
    for i in ds.test_indices:
        f = ds.frames[i]
        out = render_frame(checkpoint.model, f, dynamic)
        row = EvalRow(f.index, f.t, psnr(out.rgb, f.rgb), ssim(out.rgb, f.rgb))
        if f.mask is None:
            if not warned:
                log.warning("frames without instance masks: starred metrics omitted")
                warned = True
        else:
            dyn = f.mask > 0
            row.psnr_star = masked_psnr(out.rgb, f.rgb, dyn)
            row.ssim_star = masked_ssim(out.rgb, f.rgb, dyn)
        rows.append(row)
    return EvalTable(split, rows)
