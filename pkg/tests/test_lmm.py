"""Latent motion model: shapes, identity at init, block application, gradients, pretraining."""

import numpy as np
import pytest

from lmtrack import gradtensor as gt
from lmtrack import nn
from lmtrack.config import LmmConfig, RunConfig
from lmtrack.geometry import SE3Transform, random_transform, rot_z
from lmtrack.gradtensor import Tensor, grad_check
from lmtrack.lmm import (ConfigMismatch, EmptyDataset, LatentDataset, apply_lmm, dense_matrix, init_lmm,
                         latent_mse, output_size, pretrain_lmm, propagate_latent, tfnet_from_poses,
                         transform_shape)
from lmtrack.simulator import appearance_pairs, gen_scenes

# (variant, heads, latent width) -> block entries of K
HEAD_CONFIG_K = [
    (("full_rank", 1, 32), 32 ** 2),
    (("full_rank", 1, 96), 96 ** 2),
    (("multi_head", 16, 256), 16 * 16 ** 2),
    (("multi_head", 4, 256), 4 * 64 ** 2),
    (("multi_head", 8, 256), 8 * 32 ** 2),
]


def lmm_cfg(**kw) -> LmmConfig:
    return LmmConfig(**kw)


def perturb(params, scale=0.05, seed=0):
    """Give the zero-initialized last TfNet layer random weights so K != I."""
    rng = np.random.default_rng(seed)
    for net in filter(None, (params.obj, params.ego)):
        last = net.mlp[-1]
        last["weight"].data = rng.normal(scale=scale, size=last["weight"].shape)
        last["bias"].data = rng.normal(scale=scale, size=last["bias"].shape)
    return params


def poses(n, seed=0):
    rng = np.random.default_rng(seed)
    return [random_transform(rng, scale=3.0) for _ in range(n)]


@pytest.mark.parametrize("row,k_size", HEAD_CONFIG_K, ids=[f"{r[0]}-{r[1]}x{r[2]}" for r, _ in HEAD_CONFIG_K])
def test_head_config_output_sizes(row, k_size):
    variant, h, width = row
    cfg = lmm_cfg(variant=variant, h=h, d_l=width)
    k, heads, hd = transform_shape(cfg, 64)
    assert heads * hd * hd == k_size
    assert output_size(cfg, 64) == k_size + width
    params = init_lmm(cfg, 64, np.random.default_rng(0))
    assert params.obj.mlp[-1]["weight"].shape[0] == k_size + width


def test_heads_must_divide_width():
    with pytest.raises(ConfigMismatch):
        transform_shape(lmm_cfg(h=5, d_l=64), 64)


@pytest.mark.parametrize("mode,share", [("separate", True), ("separate", False), ("merged", True)])
@pytest.mark.parametrize("variant,h", [("multi_head", 4), ("full_rank", 1)])
def test_identity_at_init(mode, share, variant, h):
    cfg = lmm_cfg(variant=variant, h=h, apply_mode=mode, share_params=share)
    params = init_lmm(cfg, 16, np.random.default_rng(1))
    q = np.random.default_rng(2).normal(size=(5, 16))
    out = propagate_latent(Tensor(q), poses(5), poses(5, 1), cfg, params)
    assert np.max(np.abs(out.data - q)) < 1e-9


def test_identity_at_init_with_query_feature():
    cfg = lmm_cfg(use_query_feature=True)
    params = init_lmm(cfg, 16, np.random.default_rng(3))
    q = np.random.default_rng(4).normal(size=(3, 16))
    out = propagate_latent(Tensor(q), poses(3), poses(3, 1), cfg, params)
    assert np.max(np.abs(out.data - q)) < 1e-9


@pytest.mark.parametrize("variant,h,width", [("multi_head", 4, 0), ("full_rank", 1, 0), ("multi_head", 2, 8)])
def test_block_application_matches_dense(variant, h, width):
    cfg = lmm_cfg(variant=variant, h=h, d_l=width)
    params = perturb(init_lmm(cfg, 16, np.random.default_rng(5)))
    net = params.obj
    ps = poses(4, 2)
    lt = tfnet_from_poses(ps, net)
    q = np.random.default_rng(6).normal(size=(4, 16))
    got = apply_lmm(Tensor(q), lt, net).data
    w_in, w_out = net.w_in.data, net.w_out.data
    for i in range(4):
        x = w_in @ q[i]
        want = q[i] + w_out @ ((dense_matrix(lt, i) - np.eye(net.k)) @ x + lt.offset.data[i])
        assert np.max(np.abs(got[i] - want)) < 1e-12


def test_dense_form_while_projections_are_inverse():
    cfg = lmm_cfg(h=4)
    net = perturb(init_lmm(cfg, 16, np.random.default_rng(5))).obj
    lt = tfnet_from_poses(poses(2, 3), net)
    q = np.random.default_rng(6).normal(size=(2, 16))
    got = apply_lmm(Tensor(q), lt, net).data
    for i in range(2):
        want = net.w_out.data @ (dense_matrix(lt, i) @ (net.w_in.data @ q[i]) + lt.offset.data[i])
        assert np.max(np.abs(got[i] - want)) < 1e-12


@pytest.mark.parametrize("query_feature", [False, True])
def test_identity_pose_leaves_latent_unchanged(query_feature):
    cfg = lmm_cfg(h=2, use_query_feature=query_feature)
    params = perturb(init_lmm(cfg, 16, np.random.default_rng(7)), scale=0.3)
    params.obj.w_out.data = params.obj.w_out.data + 0.1  # projections need not stay inverse
    q = np.random.default_rng(8).normal(size=(3, 16))
    ident = [SE3Transform.identity()] * 3
    out = propagate_latent(Tensor(q), ident, SE3Transform.identity(), cfg, params)
    assert np.max(np.abs(out.data - q)) < 1e-12
    moved = propagate_latent(Tensor(q), poses(3), SE3Transform.identity(), cfg, params)
    assert np.max(np.abs(moved.data - q)) > 1e-3


def test_separate_mode_applies_object_then_ego():
    cfg = lmm_cfg(share_params=False)
    params = perturb(init_lmm(cfg, 16, np.random.default_rng(7)))
    q = Tensor(np.random.default_rng(8).normal(size=(1, 16)))
    t_obj, t_ego = poses(1, 3)[0], poses(1, 4)[0]
    mid = apply_lmm(q, tfnet_from_poses([t_obj], params.obj), params.obj)
    want = apply_lmm(mid, tfnet_from_poses([t_ego], params.ego), params.ego)
    got = propagate_latent(q, t_obj, t_ego, cfg, params)
    np.testing.assert_allclose(got.data, want.data, rtol=0, atol=1e-12)


def test_disabled_lmm_passes_through():
    cfg = lmm_cfg(enabled=False)
    q = Tensor(np.ones((2, 16)))
    assert propagate_latent(q, poses(2), poses(2), cfg, None) is q


def test_query_feature_flag_enforced():
    params = init_lmm(lmm_cfg(), 16, np.random.default_rng(9))
    with pytest.raises(ConfigMismatch):
        tfnet_from_poses(poses(1), params.obj, Tensor(np.zeros((1, 16))))


def test_lmm_gradients():
    cfg = lmm_cfg(h=2, hidden=12)
    params = perturb(init_lmm(cfg, 8, np.random.default_rng(10)), scale=0.2)
    q = Tensor(np.random.default_rng(11).normal(size=(3, 8)), requires_grad=True)
    t_obj, t_ego = poses(3, 5), poses(3, 6)
    flat = nn.flatten(params.tree())
    # the identity-pose anchor cancels the last bias exactly, so its gradient is zero
    last_bias = "shared/mlp/2/bias"
    leaves = [q] + [v for k, v in flat.items() if k != last_bias]

    def f(*_):
        return propagate_latent(q, t_obj, t_ego, cfg, params)

    assert grad_check(f, leaves) < 1e-4
    gt.backward(gt.sum_(gt.square(f())))
    assert np.max(np.abs(flat[last_bias].grad)) < 1e-12


def test_pretrain_overfits_single_sample():
    cfg = lmm_cfg(h=2, hidden=16)
    params = init_lmm(cfg, 8, np.random.default_rng(12))
    rng = np.random.default_rng(13)
    data = LatentDataset(rng.normal(size=(1, 8)), poses(1, 7), poses(1, 8), rng.normal(size=(1, 8)))
    _, hist = pretrain_lmm(data, params, cfg, steps=300, lr=1e-2, seed=0)
    assert hist["final_mse"] < 1e-3 * hist["initial_mse"]


def test_pretrain_rejects_empty_dataset():
    params = init_lmm(lmm_cfg(), 8, np.random.default_rng(0))
    with pytest.raises(EmptyDataset):
        pretrain_lmm(LatentDataset(np.zeros((0, 8)), [], [], np.zeros((0, 8))), params, lmm_cfg(), steps=1)


def test_block_rotation_law_is_learnable():
    """Noise-free appearance follows a block rotation of the relative yaw, which the LMM can represent."""
    cfg = RunConfig()
    cfg.sim.appearance_noise = 0.0
    cfg.sim.num_frames = 12
    cfg.sim.d_a = cfg.decoder.d_l = 16
    cfg.lmm.hidden = 32
    data = appearance_pairs(gen_scenes(cfg, 0, 6))
    params = init_lmm(cfg.lmm, 16, np.random.default_rng(0))
    before = latent_mse(data, cfg.lmm, params)
    _, hist = pretrain_lmm(data, params, cfg.lmm, steps=300, lr=3e-3, seed=0)
    assert hist["initial_mse"] == pytest.approx(before)
    assert hist["final_mse"] < 0.1 * before


def test_appearance_pairs_follow_the_law():
    cfg = RunConfig()
    cfg.sim.appearance_noise = 0.0
    cfg.sim.law_dist_coef = 0.0
    cfg.sim.num_frames = 5
    scene = gen_scenes(cfg, 1, 1)[0]
    data = appearance_pairs([scene])
    law = scene.law
    for i in range(len(data)):
        # with no distance term the change is a block rotation by yaw_mult * (object + ego yaw change)
        dyaw = data.t_obj[i].yaw + data.t_ego[i].yaw
        rot = law.matrix(SE3Transform(rot_z(dyaw), np.zeros(3)))
        np.testing.assert_allclose(rot @ data.q0[i], data.q1[i], atol=1e-9)
