import dataclasses
import logging

import numpy as np
import pytest

from coda4dgs.numeric import FormatError
from coda4dgs.synthetic import Dataset, generate_dataset
from coda4dgs.trainer import (LOG_HEADER, Checkpoint, ConfigError, DivergenceError, Trainer,
                              TrainingConfig, checkpoint_from_bytes, checkpoint_to_bytes,
                              evaluate, load_checkpoint, param_group, render_frame, train)

from conftest import tiny_spec


def small_config(**kw):
    base = dict(total_steps=30, static_phase_steps=15, feature_dim=8, time_dim=8,
                hex_resolutions=(4, 8), hex_channels=4, latent_width=16, decoder_width=16,
                prune_interval=10, seed=3)
    base.update(kw)
    return TrainingConfig(**base)


def _same_model(a, b):
    for x, y in zip(a.blocks(), b.blocks()):
        assert x.name == y.name
        np.testing.assert_array_equal(x.values, y.values)


def test_config_text_round_trip():
    cfg = small_config(dcn_inputs=("time", "con"), background=(0.1, 0.2, 0.3), dcn_enabled=False)
    back = TrainingConfig.from_text(cfg.to_text())
    assert back == cfg


@pytest.mark.parametrize("text", ["mystery_knob = 3\n", "total_steps three\n",
                                  "dcn_enabled = maybe\n", "total_steps = 1.5\n"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        TrainingConfig.from_text(text)


@pytest.mark.parametrize("kw", [dict(lr_end=1.0), dict(static_phase_steps=40),
                                dict(dcn_inputs=("time", "colour")), dict(time_dim=7),
                                dict(lr_scale_field=0.0), dict(w_depth=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        small_config(**kw)


def test_default_schedule_and_groups():
    cfg = TrainingConfig()
    assert (cfg.total_steps, cfg.static_phase_steps) == (3000, 1200)
    assert set(cfg.lr_scales.values()) == {1.0}
    assert param_group("gaussians/positions") == "geometry"
    assert param_group("gaussians/context_features") == "features"
    assert param_group("hexplane/level1/planexy") == "field"
    assert param_group("decoder/dx/layer1") == "field"
    assert param_group("dcn/phi_s/linear") == "dcn"


def test_zero_steps_returns_initialization(tiny_dataset, tmp_path):
    cfg = small_config(total_steps=0, static_phase_steps=0)
    tr = train(cfg, tiny_dataset, checkpoint_path=tmp_path / "c.ck")
    fresh = Trainer.create(cfg, tiny_dataset)
    _same_model(tr.model, fresh.model)
    ck = load_checkpoint(tmp_path / "c.ck")
    assert ck.step == 0
    _same_model(ck.model, fresh.model)


def test_phase_one_ignores_dcn_flag(tiny_dataset):
    a = Trainer.create(small_config(), tiny_dataset).run(15)
    b = Trainer.create(small_config(dcn_enabled=False), tiny_dataset).run(15)
    assert a.log_lines == b.log_lines
    for x, y in zip(a.model.gaussian_blocks(), b.model.gaussian_blocks()):
        np.testing.assert_array_equal(x.values, y.values)


def test_phase_two_starts_from_phase_one_render(tiny_dataset):
    tr = Trainer.create(small_config(), tiny_dataset).run(15)
    for f in tiny_dataset.frames[::4]:
        static = render_frame(tr.model, f, dynamic=False)
        dyn = render_frame(tr.model, f, dynamic=True)
        for name in ("rgb", "depth", "feature", "accum"):
            np.testing.assert_array_equal(getattr(dyn, name), getattr(static, name))


def test_training_is_deterministic(tiny_dataset):
    a = Trainer.create(small_config(), tiny_dataset).run()
    b = Trainer.create(small_config(), tiny_dataset).run()
    assert a.loss_log() == b.loss_log()
    assert a.loss_log().startswith(LOG_HEADER)
    assert len(a.log_lines) == 30
    # tv only contributes once the deformation field trains
    tv = [float(line.split(",")[4]) for line in a.log_lines]
    assert all(v == 0 for v in tv[:15]) and all(v > 0 for v in tv[15:])


@pytest.mark.parametrize("stop", [10, 20])
def test_resume_gives_identical_next_step(tiny_dataset, tmp_path, stop):
    ref = Trainer.create(small_config(), tiny_dataset).run(stop + 3)
    tr = Trainer.create(small_config(), tiny_dataset).run(stop)
    tr.save(tmp_path / "mid.ck")
    back = Trainer.resume(tmp_path / "mid.ck", tiny_dataset)
    assert back.step == stop
    back.run(3)
    assert back.log_lines == ref.log_lines[stop:]
    _same_model(back.model, ref.model)


def test_checkpoint_errors(tiny_dataset, tmp_path):
    tr = Trainer.create(small_config(), tiny_dataset).run(12)
    data = checkpoint_to_bytes(tr.config, tr.model, tr.step, tr.adam)
    with pytest.raises(ConfigError):
        checkpoint_from_bytes(data, expect=small_config(feature_dim=16))
    with pytest.raises(FormatError):
        checkpoint_from_bytes(data[:-100])
    with pytest.raises(FormatError, match="magic"):
        checkpoint_from_bytes(b"ZZZZ" + data[4:])
    ck = checkpoint_from_bytes(data)
    assert isinstance(ck, Checkpoint) and ck.step == 12
    assert set(ck.adam) == {b.name for b in tr.model.gaussian_blocks()}


def test_dataset_feature_dim_conflict(tiny_dataset):
    with pytest.raises(ConfigError):
        Trainer.create(small_config(feature_dim=4), tiny_dataset)


def test_divergence_names_term(tiny_dataset):
    frames = [dataclasses.replace(f, rgb=f.rgb.copy()) for f in tiny_dataset.frames]
    for f in frames:
        f.rgb[0, 0, 0] = np.nan
    bad = Dataset(frames, tiny_dataset.background, tiny_dataset.codebook, "nvs",
                  tiny_dataset.ground_truth)
    with pytest.raises(DivergenceError, match="rgb") as exc:
        Trainer.create(small_config(), bad).train_step()
    assert exc.value.term == "rgb" and exc.value.step == 0


def test_prune_slices_adam_state(tiny_dataset):
    tr = Trainer.create(small_config(), tiny_dataset).run(5)
    n = len(tr.model)
    op = tr.model.gaussians["opacity_logits"]
    op.values[:7] = -20.0
    m_before = tr.adam["gaussians/positions"].first_moment[7:].copy()
    assert tr.prune() == 7
    assert len(tr.model) == n - 7
    for name, st in tr.adam.items():
        assert st.first_moment.shape == tr.model.gaussians[name.split("/")[1]].shape
    np.testing.assert_array_equal(tr.adam["gaussians/positions"].first_moment, m_before)
    tr.run(2)


def test_evaluate_ground_truth_against_itself(tiny_dataset):
    tr = Trainer.create(small_config(), tiny_dataset)
    # a dataset whose images are exactly what the model renders
    frames = [dataclasses.replace(f, rgb=render_frame(tr.model, f, False).rgb)
              for f in tiny_dataset.frames]
    ds = Dataset(frames, tiny_dataset.background, tiny_dataset.codebook, "nvs",
                 tiny_dataset.ground_truth)
    ck = Checkpoint(tr.config, tr.model, 0, {})
    table = evaluate(ck, ds, "reconstruction")
    assert len(table.rows) == 12
    assert all(r.psnr == 99.0 and r.ssim == pytest.approx(1.0, abs=1e-12) for r in table.rows)


def test_evaluate_nvs_rows_and_missing_masks(caplog):
    ds = generate_dataset(tiny_spec(frames=24, width=12, height=12, background_blobs=10))
    tr = Trainer.create(small_config(), ds)
    ck = Checkpoint(tr.config, tr.model, 0, {})
    table = evaluate(ck, ds, "nvs")
    assert [r.frame for r in table.rows] == [0, 10, 20]
    assert table.to_csv().splitlines()[0] == "frame,t,psnr,ssim,psnr_star,ssim_star"
    nomask = Dataset([dataclasses.replace(f, mask=None) for f in ds.frames], ds.background,
                     ds.codebook, "nvs", ds.ground_truth)
    with caplog.at_level(logging.WARNING):
        t2 = evaluate(ck, nomask, "nvs")
    assert "starred" in caplog.text
    assert all(r.psnr_star is None for r in t2.rows)
    assert t2.to_csv().splitlines()[1].endswith(",,")


def test_training_reduces_loss(tiny_dataset):
    tr = Trainer.create(small_config(total_steps=200, static_phase_steps=120,
                                     prune_interval=500), tiny_dataset).run()
    totals = [float(line.rsplit(",", 1)[1]) for line in tr.log_lines]
    assert np.mean(totals[100:120]) < 0.7 * np.mean(totals[:20])
