"""Synthetic scenes: determinism, dynamics, appearance law, rendering noise, serialization."""

import numpy as np
import pytest

from lmtrack.config import InvalidConfig, RunConfig, SimConfig
from lmtrack.geometry import SE3Transform, rot_z
from lmtrack.simulator import (AppearanceLaw, appearance, gen_scene, gen_scenes, render_frame, rotate_blocks,
                               scene_from_jsonl, scene_to_jsonl)


def sim(**kw) -> SimConfig:
    cfg = SimConfig(num_frames=10)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def test_same_seed_is_bit_identical():
    assert scene_to_jsonl(gen_scene(sim(), 5)) == scene_to_jsonl(gen_scene(sim(), 5))


def test_different_seeds_differ():
    assert scene_to_jsonl(gen_scene(sim(), 5)) != scene_to_jsonl(gen_scene(sim(), 6))


def test_gen_scenes_count_and_determinism():
    a = gen_scenes(sim(num_scenes=4), 3)
    b = gen_scenes(sim(num_scenes=4), 3)
    assert len(a) == 4
    assert [scene_to_jsonl(s) for s in a] == [scene_to_jsonl(s) for s in b]


def test_zero_objects_gives_clutter_only():
    scene = gen_scene(sim(num_objects=0, clutter_rate=3.0), 0)
    tokens = [t for f in scene.frames for t in f.sensor_tokens]
    assert all(not f.gt_objects for f in scene.frames)
    assert tokens and all(t.is_clutter for t in tokens)


def test_constant_velocity_objects_move_exactly():
    cfg = sim(turning_fraction=0.0, num_frames=15)
    scene = gen_scene(cfg, 2)
    tracks = {}
    for k, f in enumerate(scene.frames):
        for o in f.gt_objects:
            tracks.setdefault(o.persistent_id, []).append((k, o))
    for obs in tracks.values():
        k0, o0 = obs[0]
        for k, o in obs:
            want = o0.world_center[:2] + (k - k0) * cfg.dt * o0.world_velocity
            np.testing.assert_allclose(o.world_center[:2], want, rtol=0, atol=1e-9)


def test_ground_truth_is_in_ego_frame():
    scene = gen_scene(sim(), 4)
    for f in scene.frames:
        for o in f.gt_objects:
            np.testing.assert_allclose(f.ego_pose.apply(o.world_center), o.box.center, atol=1e-9)


def test_occlusion_windows_hide_objects():
    scene = gen_scene(sim(occlusion_rate=1.0, occlusion_min=2, occlusion_max=2, num_frames=20), 1)
    hidden = [o for f in scene.frames for o in f.gt_objects if not o.visible]
    assert hidden
    for f in scene.frames:
        visible = {o.persistent_id for o in f.visible_objects()}
        assert {t.source_id for t in f.sensor_tokens if not t.is_clutter} <= visible


LAW = AppearanceLaw(np.array([1.0, -2.0, 3.0, 1.0]), np.array([0.2, -0.1, 0.0, 0.3]))


def test_identity_pose_leaves_base_unchanged():
    base = np.random.default_rng(0).normal(size=8)
    np.testing.assert_array_equal(appearance(LAW, base, SE3Transform()), base)


def test_appearance_preserves_norm():
    rng = np.random.default_rng(1)
    base = rng.normal(size=8)
    pose = SE3Transform(rot_z(0.7), [3.0, -4.0, 0.5])
    assert np.linalg.norm(appearance(LAW, base, pose)) == pytest.approx(np.linalg.norm(base), abs=1e-12)


def test_law_composition():
    base = np.random.default_rng(2).normal(size=8)
    a1 = LAW.angles(SE3Transform(rot_z(0.4), [2.0, 1.0, 0.0]))
    a2 = LAW.angles(SE3Transform(rot_z(-1.1), [5.0, 0.0, 0.0]))
    twice = rotate_blocks(rotate_blocks(base, a1), a2)
    once = rotate_blocks(base, a1 + a2)
    assert np.max(np.abs(twice - once)) < 1e-9
    np.testing.assert_allclose(LAW.matrix(SE3Transform(rot_z(0.4), [2.0, 1.0, 0.0])) @ base,
                               rotate_blocks(base, a1), atol=1e-12)


def test_appearance_noise_needs_rng():
    with pytest.raises(ValueError):
        appearance(AppearanceLaw(LAW.yaw_mult, LAW.dist_coef, 0.1), np.zeros(8), SE3Transform())


def test_noise_free_tokens_sit_on_ground_truth():
    cfg = sim(pos_noise=0.0, vel_noise=0.0, appearance_noise=0.0, clutter_rate=0.0, p_miss=0.0)
    scene = gen_scene(cfg, 3)
    for f in scene.frames:
        by_id = {o.persistent_id: o for o in f.visible_objects()}
        assert len(f.sensor_tokens) == len(by_id)
        for t in f.sensor_tokens:
            o = by_id[t.source_id]
            np.testing.assert_array_equal(t.position, o.box.center)
            np.testing.assert_array_equal(t.feature, o.appearance)


def test_p_miss_one_drops_every_object():
    scene = gen_scene(sim(p_miss=1.0, clutter_rate=0.0), 0)
    assert all(not f.sensor_tokens for f in scene.frames)


def test_miss_rate_monte_carlo():
    cfg = sim(num_frames=1, clutter_rate=0.0, occlusion_rate=0.0, spawn_radius=10.0)
    scene = gen_scene(cfg, 0)
    rng = np.random.default_rng(0)
    n_vis = len(scene.frames[0].visible_objects())
    renders = 10_000 // n_vis + 1
    emitted = sum(len(render_frame(scene, 0, cfg, rng)) for _ in range(renders))
    rate = 1.0 - emitted / (renders * n_vis)
    assert abs(rate - 0.1) < 0.01


def test_confidences_separate_objects_from_clutter():
    scene = gen_scene(sim(num_frames=30, clutter_rate=4.0), 0)
    obj = [t.confidence for f in scene.frames for t in f.sensor_tokens if not t.is_clutter]
    clutter = [t.confidence for f in scene.frames for t in f.sensor_tokens if t.is_clutter]
    assert all(0.0 < c < 1.0 for c in obj + clutter)
    assert np.mean(obj) > np.mean(clutter)


def test_jsonl_round_trip():
    scene = gen_scene(sim(), 9)
    text = scene_to_jsonl(scene)
    back = scene_from_jsonl(text)
    assert scene_to_jsonl(back) == text
    assert back.law.to_dict() == scene.law.to_dict()
    np.testing.assert_array_equal(back.frames[3].ego_pose.matrix(), scene.frames[3].ego_pose.matrix())


@pytest.mark.parametrize("field,value", [("dt", 0.0), ("d_a", 7), ("p_miss", 1.5), ("occlusion_min", 0),
                                         ("conf_object", 1.0)])
def test_invalid_sim_config(field, value):
    with pytest.raises(InvalidConfig):
        gen_scene(sim(**{field: value}), 0)


def test_gen_scene_accepts_run_config():
    cfg = RunConfig()
    cfg.sim.num_frames = 3
    assert len(gen_scene(cfg, 0)) == 3
