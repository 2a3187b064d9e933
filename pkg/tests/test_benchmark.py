from dataclasses import replace

import numpy as np
import pytest

from lipsplat.benchmark import (SceneConfig, animate, build_head, generate_scene, load_cameras, load_image_f32,
                                load_matrix, marker_positions, metric_lmd, metric_psnr, metric_ssim, read_scene,
                                save_cameras, save_image_f32, save_matrix, synthetic_pairs, verify_manifest,
                                write_scene)
from lipsplat.errors import ParseError, ShapeError

from helpers import orbit_camera


def test_scene_is_deterministic(tiny):
    cfg, scene, _ = tiny
    again = generate_scene(cfg.scene, 0)
    np.testing.assert_array_equal(again.talk_images, scene.talk_images)
    np.testing.assert_array_equal(again.audio.features, scene.audio.features)
    other = generate_scene(cfg.scene, 1)
    assert not np.array_equal(other.audio.features, scene.audio.features)


def test_scene_shapes(tiny):
    cfg, scene, _ = tiny
    T, S = cfg.scene.audio.n_frames, cfg.scene.image_size
    assert scene.talk_images.shape == (T, S, S, 3)
    assert scene.static_images.shape == (cfg.scene.n_static_views, S, S, 3)
    assert scene.lip_points.shape == (T, len(scene.head.template), 3)
    assert scene.landmarks.shape[:2] == (T, len(scene.marker_rest))
    assert scene.n_train == round(cfg.scene.train_fraction * T)
    assert scene.talk_images.min() >= 0 and scene.talk_images.max() <= 1


def test_zero_motion_keeps_rest_pose(tiny):
    cfg, scene, _ = tiny
    sc = replace(cfg.scene, motion_amplitude=0.0)
    head = build_head(sc, 3)
    a, b = animate(head, 0.1, -0.5, sc), animate(head, 0.9, 0.7, sc)
    np.testing.assert_array_equal(a.means, b.means)
    np.testing.assert_array_equal(marker_positions(head, 0.1, -0.5, sc), marker_positions(head, 0.9, 0.7, sc))


def test_write_read_round_trip(tiny, tmp_path):
    cfg, scene, _ = tiny
    root = write_scene(scene, tmp_path / "ds")
    assert verify_manifest(root) == []
    back = read_scene(root)
    # images are stored in float32, which the generator already rounds to
    np.testing.assert_array_equal(back.talk_images, scene.talk_images)
    np.testing.assert_array_equal(back.static_images, scene.static_images)
    np.testing.assert_array_equal(back.landmarks, scene.landmarks)
    np.testing.assert_array_equal(back.audio.features, scene.audio.features)
    np.testing.assert_array_equal(back.lip_points, scene.lip_points)
    np.testing.assert_array_equal(back.head.lip_index, scene.head.lip_index)
    assert back.config == scene.config and back.n_train == scene.n_train
    for c0, c1 in zip(back.talk_cams, scene.talk_cams):
        np.testing.assert_array_equal(c0.R, c1.R)
    (root / "talk" / "track.txt").write_text("# tampered\n")
    assert verify_manifest(root) == ["talk/track.txt"]


def test_read_scene_errors(tmp_path):
    with pytest.raises(ParseError):
        read_scene(tmp_path)
    (tmp_path / "manifest.json").write_text('{"format": "other", "version": 1}')
    with pytest.raises(ParseError):
        read_scene(tmp_path)


def test_small_file_round_trips(tmp_path, rng):
    img = rng.uniform(size=(5, 7, 3)).astype(np.float32).astype(np.float64)
    save_image_f32(tmp_path / "a.ptimg", img)
    np.testing.assert_array_equal(load_image_f32(tmp_path / "a.ptimg"), img)
    (tmp_path / "b.ptimg").write_bytes((tmp_path / "a.ptimg").read_bytes()[:-4])
    with pytest.raises(ParseError):
        load_image_f32(tmp_path / "b.ptimg")
    cams = [orbit_camera(rng) for _ in range(3)]
    save_cameras(tmp_path / "c.txt", cams)
    for a, b in zip(load_cameras(tmp_path / "c.txt"), cams):
        np.testing.assert_array_equal(a.R, b.R)
        np.testing.assert_array_equal(a.t, b.t)
        assert (a.fx, a.cy, a.width) == (b.fx, b.cy, b.width)
    (tmp_path / "d.txt").write_text("0 1 2 3\n")
    with pytest.raises(ParseError, match="20 fields"):
        load_cameras(tmp_path / "d.txt")
    m = rng.normal(size=(4, 3, 2))
    save_matrix(tmp_path / "m.txt", m, "test")
    np.testing.assert_array_equal(load_matrix(tmp_path / "m.txt"), m)


def test_synthetic_pairs_differ(tiny):
    cfg, scene, _ = tiny
    pairs = synthetic_pairs(scene.head, cfg.scene, 3, 8, seed=0)
    assert len(pairs) == 3
    assert all(a.shape == (8, cfg.scene.audio.n_features) and p.shape[0] == 8 for a, p in pairs)
    assert not np.array_equal(pairs[0][0], pairs[1][0])


def test_metrics(rng):
    a = rng.uniform(size=(12, 12, 3))
    assert metric_psnr(a, a) == float("inf")
    assert metric_psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert metric_ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    p, q = rng.normal(size=(2, 5, 4, 2))
    ref = np.mean([[np.hypot(*(p[i, j] - q[i, j])) for j in range(4)] for i in range(5)])
    assert metric_lmd(p, q) == pytest.approx(ref, rel=1e-14)
    with pytest.raises(ShapeError):
        metric_psnr(a, a[:11])
    with pytest.raises(ShapeError):
        metric_lmd(p, q[..., :1])
