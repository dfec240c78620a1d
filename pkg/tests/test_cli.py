"""Command line: artifacts, exit codes, determinism, oracle evaluation, ablation axes."""

import json

import jsonschema
import pytest

from lmtrack.cli import InvalidAxis, load_model, main, parse_axis
from lmtrack.config import RunConfig
from lmtrack.metrics import REPORT_SCHEMA

SMALL = """
decoder.d_l = 16
decoder.h = 2
decoder.num_layers = 1
decoder.ffn_width = 16
decoder.num_det_queries = 6
sim.d_a = 16
sim.num_scenes = 2
sim.num_frames = 5
sim.num_objects = 2
lmm.h = 2
lmm.hidden = 8
train.max_steps = 4
train.pretrain_steps = 5
"""


@pytest.fixture()
def workdir(tmp_path):
    (tmp_path / "small.txt").write_text(SMALL)
    return tmp_path


def run(*argv) -> int:
    return main([str(a) for a in argv])


def gen(workdir, name="scenes", seed=1):
    assert run("gen", "--config", workdir / "small.txt", "--seed", seed, "--out", workdir / name) == 0
    return workdir / name


def test_dump_defaults(capsys):
    assert run("--dump-defaults") == 0
    text = capsys.readouterr().out
    assert "lmm.variant = \"multi_head\"" in text and "tracker.max_inactive = 5" in text


def test_default_scene_count():
    cfg = RunConfig()
    assert (cfg.sim.num_scenes, cfg.sim.num_frames) == (200, 40)


def test_gen_writes_scenes_and_manifest(workdir):
    out = gen(workdir)
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(list(out.glob("scene_*.jsonl"))) == manifest["num_scenes"] == 2
    assert manifest["seed"] == 1 and len(manifest["config_hash"]) == 16


def test_gen_is_byte_identical(workdir):
    a, b = gen(workdir, "a"), gen(workdir, "b")
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_invalid_config_names_field(workdir, capsys):
    (workdir / "bad.txt").write_text("decoder.h = 5\n")
    assert run("gen", "--config", workdir / "bad.txt", "--out", workdir / "x") == 2
    assert "decoder.h" in capsys.readouterr().err


def test_missing_scenes_is_io_error(workdir):
    assert run("eval", "--oracle-gt", "--scenes", workdir / "nowhere", "--out", workdir / "x") == 3


def test_empty_scene_dir(workdir):
    (workdir / "empty").mkdir()
    assert run("eval", "--oracle-gt", "--scenes", workdir / "empty", "--out", workdir / "x") == 3


def test_epochs_zero_writes_initial_checkpoint(workdir):
    scenes = gen(workdir)
    assert run("train", "--config", workdir / "small.txt", "--scenes", scenes, "--out", workdir / "run",
               "--epochs", 0, "--no-plots") == 0
    assert json.loads((workdir / "run" / "loss.json").read_text())["loss"] == []
    model, meta = load_model(workdir / "run" / "checkpoint.json")
    assert meta["seed"] == 0 and model.cfg.decoder.d_l == 16


def train_once(workdir, scenes, name):
    out = workdir / name
    assert run("train", "--config", workdir / "small.txt", "--scenes", scenes, "--out", out, "--seed", 3) == 0
    return out


def test_train_eval_determinism(workdir):
    scenes = gen(workdir)
    a, b = train_once(workdir, scenes, "a"), train_once(workdir, scenes, "b")
    for name in ("checkpoint.json", "loss.json", "loss.png"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    for d in ("ea", "eb"):
        assert run("eval", "--checkpoint", a / "checkpoint.json", "--scenes", scenes, "--out", workdir / d) == 0
    for name in ("report.json", "per_scene.csv", "thresholds.csv", "tracks.jsonl", "recall_sweep.png"):
        assert (workdir / "ea" / name).read_bytes() == (workdir / "eb" / name).read_bytes()
    report = json.loads((workdir / "ea" / "report.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["meta"]["seed"] == 3


def test_eval_does_not_touch_inputs(workdir):
    scenes = gen(workdir)
    run_dir = train_once(workdir, scenes, "run")
    before = {p: p.read_bytes() for p in list(scenes.iterdir()) + [run_dir / "checkpoint.json"]}
    assert run("eval", "--checkpoint", run_dir / "checkpoint.json", "--scenes", scenes, "--out", workdir / "e",
               "--workers", 2) == 0
    assert all(p.read_bytes() == b for p, b in before.items())


def test_config_hash_mismatch(workdir):
    scenes = gen(workdir)
    run_dir = train_once(workdir, scenes, "run")
    (workdir / "other.txt").write_text(SMALL + "decoder.num_layers = 2\n")
    assert run("eval", "--config", workdir / "other.txt", "--checkpoint", run_dir / "checkpoint.json",
               "--scenes", scenes, "--out", workdir / "e") == 2


def test_oracle_eval_is_perfect(workdir):
    scenes = gen(workdir)
    assert run("eval", "--oracle-gt", "--scenes", scenes, "--out", workdir / "o", "--no-plots") == 0
    report = json.loads((workdir / "o" / "report.json").read_text())
    assert report["amota"] == 1.0 and report["ids"] == 0


def test_pretrain_needs_init(workdir):
    scenes = gen(workdir)
    assert run("train", "--config", workdir / "small.txt", "--scenes", scenes, "--out", workdir / "r",
               "--pretrain-lmm") == 2


def test_pretrain_from_base_checkpoint(workdir):
    scenes = gen(workdir)
    (workdir / "base.txt").write_text(SMALL + "lmm.enabled = false\ndecoder.track_embedding = false\n")
    assert run("train", "--config", workdir / "base.txt", "--scenes", scenes, "--out", workdir / "base") == 0
    assert run("train", "--config", workdir / "small.txt", "--scenes", scenes, "--out", workdir / "ft",
               "--init", workdir / "base" / "checkpoint.json", "--pretrain-lmm", "--no-plots") == 0
    loss = json.loads((workdir / "ft" / "loss.json").read_text())
    assert "samples" in loss["pretrain"]
    model, _ = load_model(workdir / "ft" / "checkpoint.json")
    assert model.lmm is not None


def test_axis_parsing():
    cfg = RunConfig()
    rows, _, labels = parse_axis("variants", cfg)
    assert len(rows) == len(labels) == 6
    rows, _, _ = parse_axis("heads", cfg)
    assert len(rows) == 5
    rows, to_config, _ = parse_axis("lmm.h=2,8", cfg)
    assert [to_config(cfg, r).lmm.h for r in rows] == [2, 8]
    with pytest.raises(InvalidAxis):
        parse_axis("lmm.nothing=1,2", cfg)
    with pytest.raises(InvalidAxis):
        parse_axis("lmm.h=5", cfg)
    with pytest.raises(InvalidAxis):
        parse_axis("sideways", cfg)


def test_ablate_lmm_axis_two_rows(workdir):
    scenes = gen(workdir)
    out = workdir / "abl"
    assert run("ablate", "--config", workdir / "small.txt", "--axis", "lmm", "--scenes", scenes, "--out", out,
               "--base-steps", 3, "--steps", 2) == 0
    lines = (out / "ablation.csv").read_text().strip().splitlines()
    assert len(lines) == 3
    assert (out / "ablation.png").exists()


def test_ablate_invalid_axis_exit_code(workdir):
    scenes = gen(workdir)
    assert run("ablate", "--axis", "bogus.field=1", "--scenes", scenes, "--out", workdir / "a") == 2
