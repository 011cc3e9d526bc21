import numpy as np
import pytest

from coda4dgs.images import FormatError, read_ppm, read_raw, write_ppm, write_raw
from coda4dgs.synthetic import (ObjectSpec, SceneSpec, SpecError, build_ground_truth,
                                bundled_spec, directory_crcs, generate_dataset, load_dataset,
                                make_codebook, oracle_render, save_dataset)

from conftest import tiny_spec


def test_spec_text_round_trip():
    spec = tiny_spec()
    back = SceneSpec.from_text(spec.to_text())
    assert back.to_text() == spec.to_text()
    assert len(back.objects) == 2 and back.objects[1].t_in == 0.3
    np.testing.assert_array_equal(back.objects[0].velocity, [1.5, 0, 0])


@pytest.mark.parametrize("text, msg", [
    ("frames = 12\nwobble = 3\n", "unknown key"),
    ("frames 12\n", "key = value"),
    ("object0.blobs = 4\nobject0.colour = 1,1,1\n", "unknown object key"),
    ("object1.blobs = 4\nobject1.center = 0,0,1\n", "contiguous"),
    ("object0.blobs = 4\nobject0.center = 0,0\n", "comma-separated"),
])
def test_spec_text_errors(text, msg):
    with pytest.raises(SpecError, match=msg):
        SceneSpec.from_text(text)


def test_spec_validation():
    with pytest.raises(SpecError, match="two frames"):
        tiny_spec(frames=1).validate()
    runaway = ObjectSpec(3, np.array([0.0, 0, 1]), np.array([50.0, 0, 0]))
    with pytest.raises(SpecError, match="leaves"):
        tiny_spec(objects=[runaway]).validate()
    with pytest.raises(SpecError, match="appearance"):
        tiny_spec(objects=[ObjectSpec(3, np.array([0.0, 0, 1]), t_in=0.8, t_out=0.2)]).validate()


def test_bundled_scenes():
    em = bundled_spec("emergent")
    em.validate()
    assert em.frames == 24 and any(o.t_in == pytest.approx(0.4) for o in em.objects)
    st = bundled_spec("static")
    assert st.objects == [] and st.background_blobs == 500
    with pytest.raises(SpecError):
        bundled_spec("nope")


def test_codebook_separation():
    rng = np.random.default_rng(0)
    for F in (8, 16):
        cb = make_codebook(5, F, rng)
        np.testing.assert_allclose(np.linalg.norm(cb, axis=1), 1.0, atol=1e-12)
        cos = cb @ cb.T
        assert np.all(cos[~np.eye(5, dtype=bool)] < 0.5)


def test_same_seed_gives_identical_dataset(tiny_dataset):
    again = generate_dataset(tiny_spec())
    for a, b in zip(tiny_dataset.frames, again.frames):
        for name in ("rgb", "depth", "features", "mask"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_no_objects_static_camera_gives_identical_frames():
    spec = tiny_spec(objects=[], frames=4, camera_end=tiny_spec().camera_start,
                     look_at_end=tiny_spec().look_at_start)
    ds = generate_dataset(spec)
    for f in ds.frames[1:]:
        np.testing.assert_array_equal(f.rgb, ds.frames[0].rgb)
        np.testing.assert_array_equal(f.features, ds.frames[0].features)


def test_linear_trajectory_displacement():
    obj = ObjectSpec(6, np.array([-1.0, 0.0, 1.5]), np.array([1.0, 0, 0]), extent=0.2)
    spec = tiny_spec(objects=[obj])
    gt = build_ground_truth(spec)
    dt = spec.frame_time(1) - spec.frame_time(0)
    prev = None
    for i in range(spec.frames):
        scene, labels = gt.snapshot(spec.frame_time(i))
        c = scene.positions[labels == 1]
        if prev is not None:
            np.testing.assert_allclose(c - prev, np.tile([dt, 0, 0], (6, 1)), atol=1e-12)
        prev = c


def test_emergent_object_absent_before_entry(tiny_dataset):
    gt = tiny_dataset.ground_truth
    _, early = gt.snapshot(0.0)
    _, late = gt.snapshot(0.5)
    assert 2 not in early and 2 in late
    assert all(2 not in f.mask for f in tiny_dataset.frames if f.t < 0.3)


def test_teacher_maps_are_codebook_rows_and_match_mask(tiny_dataset):
    cb = tiny_dataset.codebook
    for f in tiny_dataset.frames:
        np.testing.assert_array_equal(f.features, cb[f.mask])
        arg = np.argmax(f.features @ cb.T, axis=-1)
        np.testing.assert_array_equal(arg, f.mask)
    assert any((f.mask == 1).any() for f in tiny_dataset.frames)


def test_teacher_object_centre_pixel(tiny_dataset):
    f = tiny_dataset.frames[0]
    gt = tiny_dataset.ground_truth
    c = gt.spec.objects[0].center_at(f.t)
    p = f.camera.view_matrix @ np.r_[c, 1.0]
    x, y = np.round(p[:2] / p[2]).astype(int)
    assert f.mask[y, x] == 1
    np.testing.assert_array_equal(f.features[y, x], tiny_dataset.codebook[1])
    np.testing.assert_array_equal(f.features[0, 0], tiny_dataset.codebook[0])


def test_teacher_noise_option():
    ds = generate_dataset(tiny_spec(teacher_noise=0.05, frames=2))
    f = ds.frames[0]
    assert not np.array_equal(f.features, ds.codebook[f.mask])
    np.testing.assert_allclose(np.linalg.norm(f.features, axis=-1), 1.0, atol=1e-12)


def test_nvs_split_every_tenth():
    ds = generate_dataset(tiny_spec(frames=24, width=12, height=12, background_blobs=10))
    assert ds.test_indices == [0, 10, 20]
    assert len(ds.train_indices) == 21
    assert ds.with_split("reconstruction").test_indices == list(range(24))


def test_oracle_empty_scene_is_background(camera):
    from coda4dgs.gaussians import GaussianScene
    img = oracle_render(GaussianScene.empty(3), camera, (0.1, 0.2, 0.3))
    np.testing.assert_allclose(img.rgb, np.broadcast_to([0.1, 0.2, 0.3], img.rgb.shape))
    assert np.all(img.accum == 0)


def test_disk_round_trip_and_crcs(tmp_path, tiny_dataset):
    save_dataset(tiny_dataset, tmp_path / "a")
    save_dataset(generate_dataset(tiny_spec()), tmp_path / "b")
    assert directory_crcs(tmp_path / "a") == directory_crcs(tmp_path / "b")
    back = load_dataset(tmp_path / "a")
    assert len(back.frames) == 12
    for a, b in zip(tiny_dataset.frames, back.frames):
        assert np.abs(a.rgb - b.rgb).max() <= 0.5 / 255 + 1e-12
        np.testing.assert_allclose(b.depth, a.depth, rtol=1e-6)
        np.testing.assert_array_equal(b.mask, a.mask)
        np.testing.assert_allclose(b.camera.world_to_camera, a.camera.world_to_camera)
        assert a.t == b.t
    np.testing.assert_array_equal(back.codebook, tiny_dataset.codebook)


def test_image_io(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(5, 7, 3))
    write_ppm(tmp_path / "x.ppm", img)
    assert np.abs(read_ppm(tmp_path / "x.ppm") - img).max() <= 0.5 / 255 + 1e-12
    write_raw(tmp_path / "x.raw", img[..., :2])
    back = read_raw(tmp_path / "x.raw")
    assert back.shape == (5, 7, 2) and back.dtype == np.float32
    (tmp_path / "bad.raw").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError):
        read_raw(tmp_path / "bad.raw")
