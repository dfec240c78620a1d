"""Training loop, evaluation over scene sets, and latent dataset collection."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import gradtensor as gt
from .config import RunConfig
from .geometry import ObjectDynamics, object_motion_transform
from .lmm import LatentDataset
from .metrics import MetricsReport, amota_amotp, gt_sequence, result_sequence
from .optim import AdamW, cosine_lr
from .tracker import TrackerModel, TrackingResult, run_sequence

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


class EmptySceneSet(ValueError):
    pass


def sample_windows(scenes: list, cfg: RunConfig, rng: np.random.Generator) -> list:
    """(scene index, start frame) pairs for all training steps, in order."""
    win = cfg.train.window
    per_scene = cfg.train.windows_per_scene or max(1, len(scenes[0].frames) // win)
    out = []
    for _ in range(cfg.train.epochs):
        epoch = [(s, int(rng.integers(0, max(1, len(scenes[s].frames) - win + 1))))
                 for s in range(len(scenes)) for _ in range(per_scene)]
        out.extend(epoch[i] for i in rng.permutation(len(epoch)))
    if cfg.train.max_steps:
        while out and len(out) < cfg.train.max_steps:
            out.extend(out[:cfg.train.max_steps - len(out)])
        out = out[:cfg.train.max_steps]
    return out


def train(model: TrackerModel, scenes: list, cfg: RunConfig | None = None, seed: int | None = None,
          trainable=None, log_every: int = 0) -> dict:
    """Optimize ``model`` in place on random windows; returns the loss history.

    ``trainable`` optionally filters flat parameter names (all by default).
    """
    cfg = cfg or model.cfg
    if not scenes:
        raise EmptySceneSet("no training scenes")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 3])
    params = model.params()
    if trainable is not None:
        params = {k: v for k, v in params.items() if trainable(k)}
    opt = AdamW(params, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay,
                no_decay=[k for k in params if k.endswith("bias") or k.endswith("gain")
                          or k.endswith("w_in") or k.endswith("w_out")],
                lr_scale={k: cfg.train.lmm_lr_scale for k in params if k.startswith("lmm")})
    windows = sample_windows(scenes, cfg, rng)
    total = len(windows)
    history = {"loss": [], "lr": []}
    for step, (s, start) in enumerate(windows):
        loss, _ = run_sequence(scenes[s], model, "train", start=start, length=cfg.train.window, rng=rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteLoss(f"loss {value} at step {step} (scene {s}, frame {start})")
        for p in model.params().values():
            p.grad = None
        gt.backward(loss)
        lr = cosine_lr(step, total, cfg.train.lr, cfg.train.min_lr, cfg.train.warmup)
        opt.step(lr=lr, clip_norm=cfg.train.clip_norm or None)
        history["loss"].append(value)
        history["lr"].append(lr)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d/%d loss %.4f", step + 1, total, np.mean(history["loss"][-log_every:]))
    return history


def _eval_one(args):
    model, scene = args
    return run_sequence(scene, model, "eval")


def rollout(model: TrackerModel, scenes: list, workers: int = 1) -> list:
    """Eval-mode results for each scene, in scene order."""
    if not scenes:
        raise EmptySceneSet("no scenes to evaluate")
    if workers <= 1:
        return [run_sequence(s, model, "eval") for s in scenes]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(_eval_one, [(model, s) for s in scenes], chunksize=max(1, len(scenes) // (4 * workers))))


def evaluate(model: TrackerModel, scenes: list, cfg: RunConfig | None = None,
             workers: int = 1) -> tuple[MetricsReport, list]:
    cfg = cfg or model.cfg
    results = rollout(model, scenes, workers)
    return score(results, scenes, cfg), results


def score(results: list, scenes: list, cfg: RunConfig) -> MetricsReport:
    return amota_amotp([result_sequence(r) for r in results], [gt_sequence(s) for s in scenes],
                       cfg.eval.n_thresholds, cfg.eval.dist_thresh)


def oracle_result(scene) -> TrackingResult:
    """Ground truth replayed as a tracking result (ids = object ids, score 1)."""
    return TrackingResult([[(o.persistent_id, o.box) for o in f.visible_objects()] for f in scene.frames])


def collect_latent_dataset(model: TrackerModel, scenes: list) -> LatentDataset:
    """Store a model's rollouts and pair each active track's latent with its
    latent one frame later, plus the object motion implied by its decoded
    velocity and the ego motion between the frames."""
    q0, q1, t_obj, t_ego = [], [], [], []
    for scene in scenes:
        record: list = []
        run_sequence(scene, model, "eval", record=record)
        by_key = {(k, tid): (q, vel) for k, tid, q, _, vel in record}
        for (k, tid), (q, vel) in by_key.items():
            nxt = by_key.get((k + 1, tid))
            if nxt is None:
                continue
            q0.append(q)
            q1.append(nxt[0])
            t_obj.append(object_motion_transform(ObjectDynamics(vel, 0.0, scene.dt)))
            t_ego.append(scene.ego_motion(k + 1))
    d = model.cfg.decoder.d_l
    return LatentDataset(np.array(q0).reshape(-1, d), t_obj, t_ego, np.array(q1).reshape(-1, d))
