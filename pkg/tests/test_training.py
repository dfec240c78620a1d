"""Config round trip and validation, optimizer, checkpoints and the training loop."""

import math

import numpy as np
import pytest

from lmtrack import checkpoint
from lmtrack.config import InvalidConfig, RunConfig, from_text, get_field, set_field, to_text
from lmtrack.gradtensor import Tensor
from lmtrack.optim import AdamW, cosine_lr
from lmtrack.simulator import gen_scenes
from lmtrack.tracker import init_model
from lmtrack.training import EmptySceneSet, evaluate, oracle_result, sample_windows, score, train


def tiny_cfg(**sets) -> RunConfig:
    cfg = RunConfig()
    for k, v in {"decoder.d_l": 16, "decoder.h": 2, "decoder.num_layers": 1, "decoder.ffn_width": 16,
                 "decoder.num_det_queries": 6, "sim.d_a": 16, "sim.num_frames": 6, "sim.num_objects": 2,
                 "lmm.h": 2, "lmm.hidden": 8, **sets}.items():
        set_field(cfg, k, v)
    return cfg


# -- config -----------------------------------------------------------------------------------

def test_config_text_round_trip():
    cfg = tiny_cfg(**{"lmm.variant": "full_rank", "train.lr": 3e-4})
    again = from_text(to_text(cfg))
    assert again == cfg and again.hash() == cfg.hash()


def test_quoted_and_bare_strings():
    cfg = from_text('lmm.variant = "full_rank"\nlmm.apply_mode = merged\n')
    assert cfg.lmm.variant == "full_rank" and cfg.lmm.apply_mode == "merged"


@pytest.mark.parametrize("line, field", [
    ("decoder.h = 3", "decoder.h"),
    ("lmm.variant = \"bogus\"", "lmm.variant"),
    ("decoder.num_layers = 0", "decoder.num_layers"),
    ("tracker.max_inactive = 1.5", "tracker.max_inactive"),
    ("nowhere.x = 1", "nowhere.x"),
    ("sim.p_miss = 2", "sim.p_miss"),
    ("train.lr = NaN", "train.lr"),
])
def test_invalid_config_names_the_field(line, field):
    with pytest.raises(InvalidConfig) as err:
        from_text(line + "\n")
    assert err.value.field == field


def test_hash_tracks_content():
    a = RunConfig()
    b = a.copy().set("train.lr", 1e-3)
    assert a.hash() != b.hash() and a.model_hash() == b.model_hash()
    assert get_field(b, "train.lr") == 1e-3


# -- optimizer --------------------------------------------------------------------------------

def test_cosine_schedule():
    assert cosine_lr(0, 100, 1.0, warmup=10) == pytest.approx(0.1)
    assert cosine_lr(10, 110, 1.0, warmup=10) == pytest.approx(1.0)
    assert cosine_lr(110, 110, 1.0, 0.1, warmup=10) == pytest.approx(0.1)
    assert cosine_lr(60, 110, 1.0, warmup=10) == pytest.approx(0.5)


def test_adamw_first_step_is_sign_of_gradient():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    p["w"].grad = np.array([0.3, -5.0])
    AdamW(p, lr=0.1, weight_decay=0.0).step()
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9], atol=1e-6)


def test_adamw_decay_clip_and_scale():
    p = {"a": Tensor(np.array([2.0]), requires_grad=True), "lmm/b": Tensor(np.array([2.0]), requires_grad=True)}
    for t in p.values():
        t.grad = np.zeros(1)
    AdamW(p, lr=0.1, weight_decay=0.5, lr_scale={"lmm/b": 0.1}).step()
    assert p["a"].data[0] == pytest.approx(2.0 * (1 - 0.05))
    assert p["lmm/b"].data[0] == pytest.approx(2.0 * (1 - 0.005))
    q = {"w": Tensor(np.array([0.0]), requires_grad=True)}
    q["w"].grad = np.array([100.0])
    opt = AdamW(q, lr=0.1, weight_decay=0.0)
    opt.step(clip_norm=1.0)
    # clipping rescales the gradient but Adam's first step is scale-free
    assert q["w"].data[0] == pytest.approx(-0.1, rel=1e-6)
    assert math.isclose(float(np.sqrt(opt.v["w"][0] / 0.001)), 1.0, rel_tol=1e-6)


# -- checkpoints ------------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a/w": Tensor(rng.normal(size=(3, 4))), "b": Tensor(rng.normal(size=5))}
    sha = checkpoint.save(tmp_path / "c.json", params, {"seed": 1})
    assert sha == checkpoint.file_hash(tmp_path / "c.json")
    arrays, meta = checkpoint.load(tmp_path / "c.json")
    assert meta == {"seed": 1}
    for k, v in params.items():
        assert np.array_equal(arrays[k], v.data)
    fresh = {k: Tensor(np.zeros_like(v.data)) for k, v in params.items()}
    checkpoint.assign(fresh, arrays)
    assert all(np.array_equal(fresh[k].data, params[k].data) for k in params)
    with pytest.raises(KeyError):
        checkpoint.assign({"other": Tensor(np.zeros(1))}, arrays)


# -- training loop ----------------------------------------------------------------------------

def test_windows_cover_scenes():
    cfg = tiny_cfg()
    scenes = gen_scenes(cfg, 0, 3)
    wins = sample_windows(scenes, cfg, np.random.default_rng(0))
    per_scene = cfg.sim.num_frames // cfg.train.window
    assert sorted(s for s, _ in wins) == sorted(list(range(3)) * per_scene)
    assert all(0 <= k <= cfg.sim.num_frames - cfg.train.window for _, k in wins)
    capped = sample_windows(scenes, cfg.copy().set("train.max_steps", 20), np.random.default_rng(0))
    assert len(capped) == 20


def test_empty_scene_set():
    cfg = tiny_cfg()
    with pytest.raises(EmptySceneSet):
        train(init_model(cfg, 0), [], cfg)


def test_oracle_tracks_score_perfectly():
    cfg = tiny_cfg()
    scenes = gen_scenes(cfg, 4, 3)
    rep = score([oracle_result(s) for s in scenes], scenes, cfg)
    assert rep.amota == 1.0 and rep.ids == 0 and rep.fp == 0


def test_overfit_single_scene():
    cfg = tiny_cfg(**{"train.max_steps": 150, "train.lr": 3e-3, "train.warmup": 10,
                      "sim.num_objects": 1, "lmm.enabled": False})
    scenes = gen_scenes(cfg, 5, 1)
    model = init_model(cfg, 0)
    hist = train(model, scenes, cfg, seed=0)
    first, last = np.mean(hist["loss"][:5]), np.mean(hist["loss"][-5:])
    assert last < 0.2 * first
    report, results = evaluate(model, scenes, cfg)
    assert len(results) == 1 and 0.0 <= report.amota <= 1.0
