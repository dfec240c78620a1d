"""Command line interface: ``lmtrack gen | train | eval | ablate``.

Every artifact carries the config hash and seed. Repeated runs with the same
inputs write byte-identical files (manifests hold no timestamps).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import ConfigHashMismatch
from .config import InvalidConfig, RunConfig, from_text, get_field, set_field, to_text, validate
from .config import load as load_config
from .experiment import (HEAD_ROWS, VARIANT_ROWS, baseline_config, extend_model, finetune_arm,
                         heads_config, variant_config)
from .lmm import pretrain_lmm
from .simulator import gen_scenes, load_scene, scene_to_jsonl
from .tracker import TrackerModel, TrackingResult, init_model
from .training import (EmptySceneSet, NonFiniteLoss, collect_latent_dataset, oracle_result, rollout, score,
                       train)

log = logging.getLogger("lmtrack")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class InvalidAxis(ValueError):
    pass


# -- shared helpers ------------------------------------------------------------------------

def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _write(path: Path, text: str) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return _sha(text)


def _write_json(path: Path, obj) -> str:
    return _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _csv_text(rows: list, fields: list | None = None) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=fields or list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise InvalidConfig(item, "expected --set key.path=value")
        key, value = item.split("=", 1)
        set_field(cfg, key.strip(), value.strip())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return validate(cfg)


def load_scene_dir(path) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scene directory {path} does not exist")
    files = sorted(path.glob("scene_*.jsonl"))
    if not files:
        raise EmptySceneSet(f"no scene_*.jsonl files in {path}")
    return [load_scene(f) for f in files]


def save_model(path: Path, model: TrackerModel, seed: int, extra: dict | None = None) -> str:
    meta = {"config": to_text(model.cfg), "config_hash": model.cfg.hash(), "model_hash": model.cfg.model_hash(),
            "seed": seed, **(extra or {})}
    path.parent.mkdir(parents=True, exist_ok=True)
    return checkpoint.save(path, {k: p.data for k, p in model.params().items()}, meta)


def load_model(path, expected: RunConfig | None = None) -> tuple[TrackerModel, dict]:
    """Rebuild a model from a checkpoint; ``expected`` must agree on model-shaping fields."""
    arrays, meta = checkpoint.load(path)
    cfg = from_text(meta["config"])
    if cfg.model_hash() != meta.get("model_hash"):
        raise ConfigHashMismatch(f"{path}: stored config does not match its recorded hash")
    if expected is not None and expected.model_hash() != meta["model_hash"]:
        raise ConfigHashMismatch(f"{path}: checkpoint model hash {meta['model_hash']} != config "
                                 f"{expected.model_hash()}")
    model = init_model(cfg, meta.get("seed", cfg.seed))
    checkpoint.assign(model.params(), arrays)
    return model, meta


def _render(fn, *args) -> None:
    from . import plotting
    getattr(plotting, fn)(*args)


# -- gen ---------------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    if args.num_scenes is not None:
        cfg.sim.num_scenes = args.num_scenes
    out = Path(args.out)
    scenes = gen_scenes(cfg, cfg.seed)
    files = {}
    for i, scene in enumerate(scenes):
        name = f"scene_{i:04d}.jsonl"
        files[name] = _write(out / name, scene_to_jsonl(scene))
    _write(out / "config.txt", to_text(cfg))
    _write_json(out / "manifest.json", {"config_hash": cfg.hash(), "seed": cfg.seed, "num_scenes": len(scenes),
                                        "num_frames": cfg.sim.num_frames, "files": files})
    log.info("wrote %d scenes to %s", len(scenes), out)
    return EXIT_OK


# -- train ----------------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
        cfg.train.max_steps = 0
    scenes = load_scene_dir(args.scenes)
    out = Path(args.out)
    pre = None
    if args.init:
        base, _ = load_model(args.init)
        model = extend_model(base, cfg, cfg.seed)
        if args.pretrain_lmm and model.lmm is not None:
            data = collect_latent_dataset(base, scenes)
            if len(data):
                model.lmm, stats = pretrain_lmm(data, model.lmm, cfg.lmm, cfg.train.pretrain_steps,
                                                cfg.train.pretrain_lr, cfg.train.pretrain_batch, cfg.seed)
                pre = {"initial_mse": stats["initial_mse"], "final_mse": stats["final_mse"], "samples": len(data)}
            else:
                log.warning("base model produced no tracks; LMM keeps its identity init")
                pre = {"samples": 0}
    elif args.pretrain_lmm:
        raise InvalidConfig("--pretrain-lmm", "needs --init: the LMM is pretrained on a trained model's rollouts")
    else:
        model = init_model(cfg, cfg.seed)
    hist = train(model, scenes, cfg, seed=cfg.seed, log_every=args.log_every) if cfg.train.epochs else \
        {"loss": [], "lr": []}
    ck_hash = save_model(out / "checkpoint.json", model, cfg.seed)
    loss_doc = {"config_hash": cfg.hash(), "seed": cfg.seed, "loss": hist["loss"], "lr": hist["lr"],
                "checkpoint_sha256": ck_hash}
    if pre is not None:
        loss_doc["pretrain"] = pre
    _write_json(out / "loss.json", loss_doc)
    _write(out / "loss.csv", _csv_text([{"step": i, "loss": l, "lr": r}
                                        for i, (l, r) in enumerate(zip(hist["loss"], hist["lr"]))],
                                       ["step", "loss", "lr"]))
    if not args.no_plots:
        _render("plot_loss", hist["loss"], out / "loss.png")
    log.info("checkpoint %s (sha256 %s)", out / "checkpoint.json", ck_hash[:16])
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------------

def per_scene_rows(results: list, scenes: list, cfg: RunConfig) -> list:
    rows = []
    for i, (res, scene) in enumerate(zip(results, scenes)):
        row = {"scene": i, **score([res], [scene], cfg).csv_row()}
        rows.append(row)
    return rows


def cmd_eval(args) -> int:
    expected = resolve_config(args) if args.config else None
    scenes = load_scene_dir(args.scenes)
    out = Path(args.out)
    if args.oracle_gt:
        cfg = expected or RunConfig()
        results = [oracle_result(s) for s in scenes]
        meta = {"config_hash": cfg.hash(), "seed": cfg.seed, "mode": "oracle"}
    else:
        if not args.checkpoint:
            raise InvalidConfig("--checkpoint", "required unless --oracle-gt is given")
        model, ck_meta = load_model(args.checkpoint, expected)
        cfg = model.cfg
        results = rollout(model, scenes, args.workers or cfg.eval.workers)
        meta = {"config_hash": ck_meta["config_hash"], "seed": ck_meta["seed"],
                "checkpoint_sha256": checkpoint.file_hash(args.checkpoint)}
    report = score(results, scenes, cfg)
    report.meta = meta
    _write(out / "report.json", report.to_json() + "\n")
    _write(out / "per_scene.csv", _csv_text(per_scene_rows(results, scenes, cfg)))
    _write(out / "thresholds.csv", report.thresholds_csv())
    _write(out / "tracks.jsonl", "".join(_result_lines(i, r) for i, r in enumerate(results)))
    if not args.no_plots:
        _render("plot_recall_sweep", report.thresholds, out / "recall_sweep.png")
    print(json.dumps(report.csv_row(), sort_keys=True))
    return EXIT_OK


def _result_lines(scene_idx: int, result: TrackingResult) -> str:
    lines = result.to_jsonl().splitlines()
    return "".join(json.dumps({"scene": scene_idx, **json.loads(ln)}, sort_keys=True) + "\n" for ln in lines)


# -- ablate ----------------------------------------------------------------------------------

def parse_axis(spec: str, cfg: RunConfig) -> tuple[list, object, list]:
    """Axis spec -> (rows, row -> config function, labels).

    ``heads`` and ``variants`` reproduce the head-configuration and variant grids,
    ``lmm`` toggles the latent motion model, and ``path=v1,v2`` sweeps one field.
    """
    if spec == "heads":
        return HEAD_ROWS, heads_config, [f"{v} h={h} w={w}" for v, h, w in HEAD_ROWS]
    if spec == "variants":
        labels = [f"sep={int(a)} share={int(b)} feat={int(c)}" for a, b, c in VARIANT_ROWS]
        return VARIANT_ROWS, variant_config, labels
    if spec == "lmm":
        return [False, True], _lmm_toggle, ["no LMM", "LMM"]
    if "=" not in spec:
        raise InvalidAxis(f"axis {spec!r}: expected heads, variants, lmm or key.path=v1,v2,...")
    path, raw = spec.split("=", 1)
    path = path.strip()
    try:
        get_field(cfg, path)
    except InvalidConfig as exc:
        raise InvalidAxis(f"axis {spec!r}: unknown field {path}") from exc
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if not values:
        raise InvalidAxis(f"axis {spec!r}: no values")

    def to_config(base: RunConfig, value) -> RunConfig:
        out = base.copy()
        try:
            set_field(out, path, value)
            return validate(out)
        except InvalidConfig as exc:
            raise InvalidAxis(f"axis {spec!r}: {exc}") from exc

    for v in values:
        to_config(cfg, v)
    return values, to_config, [f"{path}={v}" for v in values]


def _lmm_toggle(base: RunConfig, on: bool) -> RunConfig:
    out = base.copy()
    out.lmm.enabled = on
    return out


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    rows, to_config, labels = parse_axis(args.axis, cfg)
    scenes = load_scene_dir(args.scenes)
    eval_scenes = load_scene_dir(args.eval_scenes) if args.eval_scenes else scenes
    out = Path(args.out)
    if args.init:
        base, _ = load_model(args.init)
    else:
        base_cfg = baseline_config(cfg)
        base_cfg.train.max_steps = args.base_steps
        base = init_model(base_cfg, cfg.seed)
        train(base, scenes, base_cfg, seed=cfg.seed)
    table = []
    for row, label in zip(rows, labels):
        row_cfg = to_config(cfg, row)
        arm, model = finetune_arm(label, base, row_cfg, scenes, eval_scenes, cfg.seed, args.steps)
        lmm = model.lmm
        entry = {"label": label, "k_size": lmm.obj.h * lmm.obj.hd ** 2 if lmm else 0,
                 "offset": lmm.obj.k if lmm else 0, **arm.report.csv_row()}
        if arm.pretrain:
            entry["pretrain_mse_ratio"] = arm.pretrain["final_mse"] / max(arm.pretrain["initial_mse"], 1e-300)
        table.append(entry)
        log.info("%s: amota %.4f ids %d", label, entry["amota"], entry["ids"])
    fields = sorted({k for e in table for k in e}, key=lambda k: list(table[0]).index(k) if k in table[0] else 99)
    _write(out / "ablation.csv", _csv_text(table, fields))
    _write_json(out / "ablation.json", {"config_hash": cfg.hash(), "seed": cfg.seed, "axis": args.axis,
                                        "rows": table})
    if not args.no_plots:
        _render("plot_ablation", table, out / "ablation.png", f"ablation: {args.axis}")
    print(_csv_text(table, fields), end="")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lmtrack", description="Latent motion model tracking on synthetic scenes.")
    p.add_argument("--dump-defaults", action="store_true", help="print the default config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    def common(sp, out_required=True):
        sp.add_argument("--config", help="key.path = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--workers", type=int, default=0, help="evaluation processes (0: config value)")
        sp.add_argument("--no-plots", action="store_true", help="skip PNG figures")

    g = sub.add_parser("gen", help="generate synthetic scenes")
    common(g)
    g.add_argument("--num-scenes", type=int)

    t = sub.add_parser("train", help="train a tracker")
    common(t)
    t.add_argument("--scenes", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--init", help="checkpoint to continue from")
    t.add_argument("--pretrain-lmm", action="store_true", help="pretrain the LMM on the --init model's rollouts")
    t.add_argument("--log-every", type=int, default=0)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--scenes", required=True)
    e.add_argument("--oracle-gt", action="store_true", help="score ground truth replayed as predictions")

    a = sub.add_parser("ablate", help="fine-tune and evaluate one variant per axis value")
    common(a)
    a.add_argument("--axis", required=True, help="heads | variants | lmm | key.path=v1,v2,...")
    a.add_argument("--scenes", required=True)
    a.add_argument("--eval-scenes")
    a.add_argument("--init", help="trained baseline checkpoint (otherwise one is trained first)")
    a.add_argument("--base-steps", type=int, default=2000)
    a.add_argument("--steps", type=int, default=1000, help="fine-tuning steps per variant")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.dump_defaults:
        sys.stdout.write(to_text(RunConfig()))
        return EXIT_OK
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (InvalidConfig, InvalidAxis, ConfigHashMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, EmptySceneSet, json.JSONDecodeError, KeyError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLoss, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
