"""``coda4dgs <synth|train|render|eval|segment|edit|pca>``.

Exit codes: 0 success, 2 input error, 3 checkpoint error, 4 semantic error.
"""

from __future__ import annotations

import argparse
import logging
import shlex
import sys
from pathlib import Path

import numpy as np

from .editing import EditableScene, SemanticError, pca_visualize, segment
from .gaussians import save_scene
from .images import RAW_MAGIC, read_raw, write_ppm, write_raw
from .losses import psnr
from .numeric import FormatError
from .synthetic import SceneSpec, SpecError, bundled_spec, generate_dataset, load_dataset, \
    save_dataset
from .trainer import ConfigError, DivergenceError, TrainingConfig, evaluate, frame_phase, \
    load_checkpoint, train

log = logging.getLogger("coda4dgs")

EXIT_OK, EXIT_INPUT, EXIT_CHECKPOINT, EXIT_SEMANTIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_ck(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint not found: {path}", EXIT_CHECKPOINT) from exc
    except (FormatError, ConfigError, KeyError, UnicodeDecodeError) as exc:
        raise CliError(f"bad checkpoint {path}: {exc}", EXIT_CHECKPOINT) from exc


def _load_data(path, split="nvs"):
    if path is None:
        raise CliError("--data is required for this command", EXIT_INPUT)
    try:
        return load_dataset(path, split)
    except (OSError, SpecError, FormatError, ValueError) as exc:
        raise CliError(f"cannot read dataset {path}: {exc}", EXIT_INPUT) from exc


def _frame_for(ds, ck, t):
    if not 0.0 <= t <= 1.0:
        raise CliError("--t must lie in [0, 1]", EXIT_INPUT)
    idx = int(round(t * (ck.config.num_frames - 1)))
    idx = min(max(idx, 0), len(ds.frames) - 1)
    return ds.frames[idx]


def _query_vector(query: str, ds, feature_dim: int) -> np.ndarray:
    try:
        k = int(query)
    except ValueError:
        k = None
    if k is not None:
        if ds is None:
            raise CliError("a codebook id query needs --data", EXIT_INPUT)
        if not 0 <= k < len(ds.codebook):
            raise CliError(f"codebook id {k} out of range 0..{len(ds.codebook) - 1}", EXIT_INPUT)
        return ds.codebook[k]
    p = Path(query)
    if not p.exists():
        raise CliError(f"query file not found: {query}", EXIT_INPUT)
    raw = p.read_bytes()
    try:
        vec = read_raw(p).reshape(-1) if raw[:4] == RAW_MAGIC else \
            np.array(raw.decode().replace(",", " ").split(), dtype=np.float64)
    except (FormatError, ValueError) as exc:
        raise CliError(f"bad query file {query}: {exc}", EXIT_INPUT) from exc
    if vec.shape[0] != feature_dim:
        raise CliError(f"query has {vec.shape[0]} dims, model features have {feature_dim}",
                       EXIT_SEMANTIC)
    return vec.astype(np.float64)


# ------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    try:
        spec = bundled_spec(args.scene) if args.scene else SceneSpec.load(args.config)
    except FileNotFoundError as exc:
        raise CliError(f"spec not found: {exc.filename or args.config}", EXIT_INPUT) from exc
    except SpecError as exc:
        raise CliError(f"invalid spec: {exc}", EXIT_INPUT) from exc
    if args.seed is not None:
        spec.seed = args.seed
    save_dataset(generate_dataset(spec), args.out)
    print(f"wrote {spec.frames} frames to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _load_data(args.data)
    overrides = {} if args.seed is None else {"seed": args.seed}
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    try:
        cfg = TrainingConfig.load(args.config, **overrides) if args.config else \
            TrainingConfig(**overrides)
    except FileNotFoundError as exc:
        raise CliError(f"config not found: {args.config}", EXIT_INPUT) from exc
    except (ConfigError, TypeError) as exc:
        raise CliError(f"invalid config: {exc}", EXIT_INPUT) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        tr = train(cfg, ds, checkpoint_path=out / "checkpoint.c4dk",
                   log_path=out / "loss_log.csv")
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_SEMANTIC) from exc
    except DivergenceError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_SEMANTIC) from exc
    print(f"trained {tr.step} steps, {len(tr.model)} Gaussians -> {out / 'checkpoint.c4dk'}")
    return EXIT_OK


def cmd_render(args) -> int:
    ck = _load_ck(args.checkpoint)
    ds = _load_data(args.data)
    frame = _frame_for(ds, ck, args.t)
    cam = frame.camera.rotated(args.yaw, args.pitch)
    dynamic = frame_phase(ck.config, ck.step)
    out = ck.model.forward(cam, args.t, frame.index, dynamic=dynamic)[0]
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / "rgb.ppm", out.rgb)
    write_raw(d / "depth.raw", out.depth)
    write_raw(d / "feature.raw", out.feature)
    write_raw(d / "accum.raw", out.accum)
    if args.yaw == 0 and args.pitch == 0 and abs(frame.t - args.t) < 1e-12:
        print(f"frame {frame.index} psnr {psnr(out.rgb, frame.rgb):.6f}")
    print(f"wrote rgb/depth/feature/accum to {d}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = _load_ck(args.checkpoint)
    ds = _load_data(args.data)
    table = evaluate(ck, ds, args.split)
    text = table.to_csv()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_segment(args) -> int:
    ck = _load_ck(args.checkpoint)
    ds = _load_data(args.data) if args.data else None
    if args.query is None:
        raise CliError("--query is required", EXIT_INPUT)
    q = _query_vector(args.query, ds, ck.config.feature_dim)
    try:
        ids = segment(ck.model.scene, q, args.threshold)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INPUT if not isinstance(exc, SemanticError)
                       else EXIT_SEMANTIC) from exc
    text = "".join(f"{i}\n" for i in ids)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def parse_edit_script(text: str) -> list[tuple[str, dict]]:
    ops = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = shlex.split(line)
        name, kw = words[0], {}
        for w in words[1:]:
            if "=" not in w:
                raise CliError(f"edit script line {lineno}: expected key=value, got {w!r}",
                               EXIT_INPUT)
            k, v = w.split("=", 1)
            kw[k] = v
        if name not in ("segment", "extract", "transform", "merge"):
            raise CliError(f"edit script line {lineno}: unknown operation {name!r}", EXIT_INPUT)
        if "threshold" in kw:
            try:
                thr = float(kw["threshold"])
            except ValueError:
                thr = float("nan")
            if not 0.0 < thr < 1.0:
                raise CliError(f"edit script line {lineno}: threshold must be in (0, 1)",
                               EXIT_INPUT)
        if name == "merge" and "checkpoint" not in kw:
            raise CliError(f"edit script line {lineno}: merge needs checkpoint=PATH", EXIT_INPUT)
        ops.append((name, kw))
    seen_segment = False
    for name, _ in ops:
        if name == "segment":
            seen_segment = True
        if name == "extract" and not seen_segment:
            raise CliError("edit script: extract needs a preceding segment", EXIT_INPUT)
    return ops


def _floats(text: str, n: int) -> np.ndarray:
    v = np.array([float(x) for x in text.split(",")])
    if v.shape != (n,):
        raise CliError(f"expected {n} comma-separated numbers, got {text!r}", EXIT_INPUT)
    return v


def cmd_edit(args) -> int:
    script = Path(args.config)
    if not script.exists():
        raise CliError(f"edit script not found: {script}", EXIT_INPUT)
    ops = parse_edit_script(script.read_text())
    base = script.parent
    ck = _load_ck(args.checkpoint)
    ds = _load_data(args.data) if args.data else None
    scene = EditableScene.from_model(ck.model, frame_phase(ck.config, ck.step))
    ids = None
    last = None
    for name, kw in ops:
        if name == "segment":
            q = _query_vector(kw.get("query", ""), ds, ck.config.feature_dim)
            ids = segment(scene.parts[0].scene, q, float(kw.get("threshold", 0.9)))
        elif name == "extract":
            piece = scene.extract(0, ids, remove=kw.get("mode", "remove") == "remove")
            last = len(scene.parts) - 1
            if "out" in kw:
                save_scene(piece.scene, base / kw["out"])
        elif name == "transform":
            if last is None:
                raise CliError("edit script: transform needs a preceding extract", EXIT_INPUT)
            rot = _floats(kw.get("rotation", "1,0,0,0"), 4)
            if np.linalg.norm(rot) == 0:
                raise CliError("transform rotation quaternion is zero", EXIT_INPUT)
            scene.transform(last, rot, _floats(kw.get("translation", "0,0,0"), 3))
        elif name == "merge":
            other = _load_ck(base / kw["checkpoint"])
            part_scene = EditableScene.from_model(other.model,
                                                  frame_phase(other.config, other.step))
            if other.config.feature_dim != ck.config.feature_dim:
                raise CliError(f"cannot merge feature dim {other.config.feature_dim} into "
                               f"{ck.config.feature_dim}", EXIT_SEMANTIC)
            if "query" in kw:
                q = _query_vector(kw["query"], ds, other.config.feature_dim)
                sel = segment(part_scene.parts[0].scene, q, float(kw.get("threshold", 0.9)))
                part_scene = EditableScene([part_scene.parts[0]])
                piece = part_scene.extract(0, sel, remove=True)
                part_scene = EditableScene([piece])
            scene.merge(part_scene)
            last = len(scene.parts) - 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame_index = int(round(args.t * (ck.config.num_frames - 1)))
    snap = scene.at(args.t, frame_index)
    save_scene(snap, out / "scene_t.c4dg")
    if ds is not None:
        cam = _frame_for(ds, ck, args.t).camera.rotated(args.yaw, args.pitch)
        img = scene.render(cam, args.t, frame_index)
        write_ppm(out / "render.ppm", img.rgb)
    print(f"edited scene: {len(snap)} Gaussians in {len(scene.parts)} parts -> {out}")
    return EXIT_OK


def cmd_pca(args) -> int:
    ck = _load_ck(args.checkpoint)
    if ck.config.feature_dim < 3:
        raise CliError(f"PCA needs feature_dim >= 3, checkpoint has {ck.config.feature_dim}",
                       EXIT_SEMANTIC)
    ds = _load_data(args.data)
    frame = _frame_for(ds, ck, args.t)
    cam = frame.camera.rotated(args.yaw, args.pitch)
    out = ck.model.forward(cam, args.t, frame.index, dynamic=frame_phase(ck.config, ck.step))[0]
    vis = pca_visualize(out.feature)
    path = Path(args.out)
    if path.suffix != ".ppm":
        path.mkdir(parents=True, exist_ok=True)
        path = path / "pca.ppm"
    write_ppm(path, vis)
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = dict(synth=cmd_synth, train=cmd_train, render=cmd_render, eval=cmd_eval,
                segment=cmd_segment, edit=cmd_edit, pca=cmd_pca)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coda4dgs", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--config", help="scene spec file")
    g.add_argument("--scene", choices=("emergent", "static"), help="bundled scene")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("train", help="train a model on a dataset directory")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="training config (key = value)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int, help="override total_steps")

    for name in ("render", "pca"):
        s = sub.add_parser(name, help="render images" if name == "render"
                           else "PCA visualization of the feature image")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True, help="dataset directory supplying cameras")
        s.add_argument("--t", type=float, default=0.0)
        s.add_argument("--yaw", type=float, default=0.0)
        s.add_argument("--pitch", type=float, default=0.0)
        s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="per-frame metrics as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("nvs", "reconstruction"), default="nvs")
    s.add_argument("--out")

    s = sub.add_parser("segment", help="Gaussian ids matching a feature query")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--query", required=True, help="codebook id or F-vector file")
    s.add_argument("--threshold", type=float, default=0.9)
    s.add_argument("--data")
    s.add_argument("--out")

    s = sub.add_parser("edit", help="apply an edit script")
    s.add_argument("--config", required=True, help="edit script")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--t", type=float, default=0.0)
    s.add_argument("--yaw", type=float, default=0.0)
    s.add_argument("--pitch", type=float, default=0.0)
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SemanticError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SEMANTIC


if __name__ == "__main__":
    sys.exit(main())
