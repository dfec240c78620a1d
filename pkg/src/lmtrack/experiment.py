"""Baseline vs latent-motion-model comparison and ablation grids.

Per seed the protocol mirrors fine-tuning from an existing tracker: train a
geometric-only baseline (no LMM, no track embedding), then continue training
it for the same number of steps either unchanged or with the LMM (pretrained
on the baseline's stored rollouts) and track embedding switched on.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .decoder import init_track_embedding
from .lmm import init_lmm, pretrain_lmm
from .metrics import MetricsReport
from .simulator import gen_scenes
from .tracker import TrackerModel, init_model
from .training import collect_latent_dataset, evaluate, train

log = logging.getLogger(__name__)

# (apply separately, share parameters, query features) rows of the LMM variant ablation
VARIANT_ROWS = [
    (False, True, False),
    (False, True, True),
    (True, False, False),
    (True, False, True),
    (True, True, True),
    (True, True, False),
]

# (variant, heads, latent width) rows of the head-configuration ablation
HEAD_ROWS = [
    ("full_rank", 1, 32),
    ("full_rank", 1, 96),
    ("multi_head", 16, 256),
    ("multi_head", 4, 256),
    ("multi_head", 8, 256),
]


def baseline_config(cfg: RunConfig) -> RunConfig:
    base = cfg.copy()
    base.lmm.enabled = False
    base.decoder.track_embedding = False
    return base


def variant_config(cfg: RunConfig, row: tuple) -> RunConfig:
    separate, share, feats = row
    out = cfg.copy()
    out.lmm.enabled = True
    out.lmm.apply_mode = "separate" if separate else "merged"
    out.lmm.share_params = share
    out.lmm.use_query_feature = feats
    return out


def heads_config(cfg: RunConfig, row: tuple) -> RunConfig:
    variant, h, width = row
    out = cfg.copy()
    out.lmm.enabled = True
    out.lmm.variant = variant
    out.lmm.h = h
    out.lmm.d_l = width
    return out


def extend_model(base: TrackerModel, cfg: RunConfig, seed: int) -> TrackerModel:
    """Copy a trained model and add the LMM / track embedding ``cfg`` asks for.

    Both additions start as the identity, so the extended model initially
    reproduces the base model exactly.
    """
    decoder = copy.deepcopy(base.decoder)
    rng = np.random.default_rng([seed, 4])
    if cfg.decoder.track_embedding and "track_embedding" not in decoder:
        decoder["track_embedding"] = init_track_embedding(cfg.decoder, rng)
    if not cfg.decoder.track_embedding:
        decoder.pop("track_embedding", None)
    lmm = init_lmm(cfg.lmm, cfg.decoder.d_l, rng) if cfg.lmm.enabled else None
    return TrackerModel(cfg, decoder, lmm)


@dataclass
class ArmResult:
    name: str
    report: MetricsReport
    train_loss: list = field(default_factory=list)
    pretrain: dict | None = None
    seconds: float = 0.0


def finetune_arm(name: str, base: TrackerModel, cfg: RunConfig, train_scenes: list, eval_scenes: list, seed: int,
                 steps: int, pretrain_scenes: list | None = None) -> tuple[ArmResult, TrackerModel]:
    t0 = time.time()
    model = extend_model(base, cfg, seed)
    pre = None
    if model.lmm is not None and cfg.train.pretrain_steps > 0:
        # the pretraining data comes from the base model's own rollouts
        data = collect_latent_dataset(base, pretrain_scenes or train_scenes)
        if len(data):
            model.lmm, pre = pretrain_lmm(data, model.lmm, cfg.lmm, cfg.train.pretrain_steps, cfg.train.pretrain_lr,
                                          cfg.train.pretrain_batch, seed)
            pre = {"initial_mse": pre["initial_mse"], "final_mse": pre["final_mse"], "samples": len(data)}
    run_cfg = cfg.copy()
    run_cfg.train.max_steps = steps
    hist = train(model, train_scenes, run_cfg, seed=seed + 1000) if steps else {"loss": []}
    report, _ = evaluate(model, eval_scenes, cfg, cfg.eval.workers)
    return ArmResult(name, report, hist["loss"], pre, time.time() - t0), model


@dataclass
class SeedRun:
    seed: int
    baseline: ArmResult
    variant: ArmResult
    base: TrackerModel | None = field(default=None, repr=False)


def scene_sets(cfg: RunConfig, seed: int, n_train: int, n_eval: int) -> tuple[list, list]:
    return gen_scenes(cfg, 10_000 + seed, n_train), gen_scenes(cfg, 20_000 + seed, n_eval)


def train_base(cfg: RunConfig, train_scenes: list, seed: int, steps: int) -> tuple[TrackerModel, list]:
    base_cfg = baseline_config(cfg)
    base_cfg.train.max_steps = steps
    model = init_model(base_cfg, seed)
    hist = train(model, train_scenes, base_cfg, seed=seed)
    return model, hist["loss"]


def compare(cfg: RunConfig, seed: int, base_steps: int, finetune_steps: int, n_train: int = 200,
            n_eval: int = 200, scenes: tuple | None = None) -> SeedRun:
    """One seed of the baseline vs LMM + track embedding comparison."""
    train_scenes, eval_scenes = scenes or scene_sets(cfg, seed, n_train, n_eval)
    base, _ = train_base(cfg, train_scenes, seed, base_steps)
    var_cfg = cfg.copy()
    var_cfg.lmm.enabled = True
    var_cfg.decoder.track_embedding = True
    b, _ = finetune_arm("baseline", base, baseline_config(cfg), train_scenes, eval_scenes, seed, finetune_steps)
    v, _ = finetune_arm("lmm+te", base, var_cfg, train_scenes, eval_scenes, seed, finetune_steps)
    log.info("seed %d: baseline ids %d amota %.3f | lmm+te ids %d amota %.3f", seed, b.report.ids,
             b.report.amota, v.report.ids, v.report.amota)
    return SeedRun(seed, b, v, base)


def median_run(runs: list, arm: str) -> ArmResult:
    """The run whose AMOTA is the median across seeds (lower median for even counts)."""
    arms = sorted((getattr(r, arm) for r in runs), key=lambda a: (a.report.amota, a.report.ids))
    return arms[(len(arms) - 1) // 2]


def ablation_rows(cfg: RunConfig, base: TrackerModel, rows: list, to_config, train_scenes: list, eval_scenes: list,
                  seed: int, steps: int) -> list:
    """Fine-tune one variant per row from a shared base model; one dict per row."""
    out = []
    for row in rows:
        row_cfg = to_config(cfg, row)
        row_cfg.decoder.track_embedding = cfg.decoder.track_embedding
        arm, model = finetune_arm(str(row), base, row_cfg, train_scenes, eval_scenes, seed, steps)
        k, h, hd = (model.lmm.obj.k, model.lmm.obj.h, model.lmm.obj.hd) if model.lmm else (0, 0, 0)
        entry = {"row": row, "k_size": h * hd * hd, "offset": k, **arm.report.csv_row()}
        if arm.pretrain:
            entry["pretrain_mse_ratio"] = arm.pretrain["final_mse"] / max(arm.pretrain["initial_mse"], 1e-300)
        out.append(entry)
    return out

