"""Auto-regressive tracking loop.

Per frame: predict (geometric reference update + latent motion model) ->
track embedding -> append fresh detection queries -> decode -> lifecycle.
Training unrolls short windows with sticky ground-truth assignment, focal
and L1 losses with deep supervision, and track drop / false-positive
augmentation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import gradtensor as gt
from . import nn
from .boxes import BoundingBox3D
from .config import RunConfig, TrackerConfig
from .decoder import (DecoderOutput, TokenSet, apply_track_embedding, boxes_from_reg, detection_queries,
                      init_decoder, run_decoder, scores_from_logits)
from .geometry import ObjectDynamics, SE3Transform, object_motion_transform, update_reference
from .gradtensor import Tensor
from .lmm import LmmParams, init_lmm, propagate_latent
from .simulator import Scene

NEWBORN, ACTIVE, INACTIVE = "newborn", "active", "inactive"


class EmptyScene(ValueError):
    pass


@dataclass
class ObjectQuery:
    q: Tensor
    ref: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    turn_rate: float = 0.0
    track_id: int | None = None
    state: str = NEWBORN
    age: int = 0
    score: float = 0.0
    box: BoundingBox3D | None = None
    gt_id: int | None = None
    is_fp: bool = False


class IdAllocator:
    """Hands out strictly increasing track ids; never reuses one."""

    def __init__(self, start: int = 0):
        self.next_id = start

    def __call__(self) -> int:
        tid = self.next_id
        self.next_id += 1
        return tid


@dataclass
class TrackingResult:
    frames: list  # per frame: list of (track_id, BoundingBox3D)

    def to_jsonl(self) -> str:
        rows = []
        for k, tracks in enumerate(self.frames):
            rows.append(json.dumps({
                "frame_idx": k,
                "tracks": [{"id": int(tid), "box": box.as_vector().tolist(), "score": box.score,
                            "class": box.class_id} for tid, box in tracks],
            }, sort_keys=True))
        return "\n".join(rows) + ("\n" if rows else "")

    @classmethod
    def from_jsonl(cls, text: str) -> "TrackingResult":
        rows = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
        rows.sort(key=lambda r: r["frame_idx"])
        return cls([[(t["id"], BoundingBox3D.from_vector(t["box"], t["score"], t["class"])) for t in r["tracks"]]
                    for r in rows])


class Freezer:
    """Record values that are treated as constants (no gradient) during a rollout
    and replay them on later calls, so finite differences see the same
    stop-gradient structure as autodiff."""

    def __init__(self):
        self.store: dict = {}
        self.replay = False

    def __call__(self, key, fn):
        if self.replay and key in self.store:
            return self.store[key]
        value = fn()
        self.store[key] = value
        return value


def _passthrough(key, fn):
    return fn()


# -- model -----------------------------------------------------------------------

@dataclass
class TrackerModel:
    cfg: RunConfig
    decoder: dict
    lmm: LmmParams | None

    def tree(self) -> dict:
        tree = {"decoder": self.decoder}
        if self.lmm is not None:
            tree["lmm"] = self.lmm.tree()
        return tree

    def params(self) -> dict:
        return nn.flatten(self.tree())


def init_model(cfg: RunConfig, seed: int | None = None) -> TrackerModel:
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    decoder = init_decoder(cfg.decoder, rng)
    lmm = init_lmm(cfg.lmm, cfg.decoder.d_l, np.random.default_rng([seed, 2])) if cfg.lmm.enabled else None
    return TrackerModel(cfg, decoder, lmm)


# -- prediction / update -------------------------------------------------------------

def stack_queries(tracks: list, d: int) -> Tensor:
    if not tracks:
        return Tensor(np.zeros((0, d)))
    return gt.concat([gt.reshape(t.q, (1, d)) for t in tracks], axis=0)


def predict_step(tracks: list, ego_motion: SE3Transform, dt: float, model: TrackerModel) -> list:
    """Propagate tracks into the next ego frame.

    References move by the constant-velocity object transform and then the ego
    transform; latents go through the latent motion model with the same two
    transforms. Velocities are re-expressed in the new ego axes.
    """
    if not tracks:
        return []
    use_turn = model.cfg.tracker.use_turn_rate
    t_objs = [object_motion_transform(ObjectDynamics(t.velocity, t.turn_rate if use_turn else 0.0, dt))
              for t in tracks]
    d = model.cfg.decoder.d_l
    if model.lmm is not None and model.cfg.lmm.enabled:
        q = propagate_latent(stack_queries(tracks, d), t_objs, ego_motion, model.cfg.lmm, model.lmm)
        qs = [q[i] for i in range(len(tracks))]
    else:
        qs = [t.q for t in tracks]
    rot2 = ego_motion.rotation[:2, :2]
    out = []
    for t, t_obj, qi in zip(tracks, t_objs, qs):
        ref = update_reference(t.ref, t_obj, ego_motion)
        out.append(replace(t, q=qi, ref=ref, velocity=rot2 @ t.velocity))
    return out


def update_step(queries: Tensor, refs: np.ndarray, tokens: TokenSet, model: TrackerModel) -> DecoderOutput:
    return run_decoder(queries, refs, tokens, model.decoder, model.cfg.decoder)


def prepare_track_queries(tracks: list, model: TrackerModel) -> Tensor:
    q = stack_queries(tracks, model.cfg.decoder.d_l)
    if tracks and model.cfg.decoder.track_embedding and "track_embedding" in model.decoder:
        q = apply_track_embedding(q, model.decoder["track_embedding"])
    return q


def frame_queries(tracks: list, model: TrackerModel, tokens: TokenSet):
    """Track queries (after the track embedding) followed by the detection queries."""
    dq, det_refs = detection_queries(tokens, model.decoder, model.cfg.decoder)
    if not tracks:
        return dq, det_refs
    tq = prepare_track_queries(tracks, model)
    return gt.concat([tq, dq], axis=0), np.concatenate([np.stack([t.ref for t in tracks]), det_refs])


# -- lifecycle -------------------------------------------------------------------------

def lifecycle(queries: list, scores, cfg: TrackerConfig, ids: IdAllocator, dup_radius: float = 0.0) -> list:
    """Apply spawn / keep / inactive rules and return the tracks to carry on.

    Newborns at or above ``spawn_thresh`` get a fresh id; active tracks below
    ``keep_thresh`` turn inactive; inactive tracks at or above ``keep_thresh``
    reactivate, otherwise age and are dropped once older than ``max_inactive``.

    With ``dup_radius > 0``, a track whose decoded center lies within that
    distance of an older active track is treated as a miss for this frame,
    and a newborn next to any kept track (or a stronger newborn) is not spawned.
    """
    scores = [float(s) for s in scores]
    keep: dict = {}
    kept_centers: list = []

    def is_dup(query) -> bool:
        if dup_radius <= 0 or query.box is None:
            return False
        c = query.box.center[:2]
        return any(np.hypot(*(c - k)) < dup_radius for k in kept_centers)

    tracked = sorted((i for i, q in enumerate(queries) if q.state != NEWBORN), key=lambda i: queries[i].track_id)
    for i in tracked:
        query, score = queries[i], scores[i]
        if score >= cfg.keep_thresh and not is_dup(query):
            keep[i] = replace(query, state=ACTIVE, age=0, score=score)
            if query.box is not None:
                kept_centers.append(query.box.center[:2])
        else:
            age = 1 if query.state == ACTIVE else query.age + 1
            if age <= cfg.max_inactive:
                keep[i] = replace(query, state=INACTIVE, age=age, score=score)
    newborns = sorted((i for i, q in enumerate(queries) if q.state == NEWBORN), key=lambda i: (-scores[i], i))
    accepted = []
    for i in newborns:
        if scores[i] >= cfg.spawn_thresh and not is_dup(queries[i]):
            accepted.append(i)
            if queries[i].box is not None:
                kept_centers.append(queries[i].box.center[:2])
    for i in sorted(accepted):
        keep[i] = replace(queries[i], track_id=ids(), state=ACTIVE, age=0, score=scores[i])
    return [keep[i] for i in sorted(keep)]


# -- training-time matching and loss ------------------------------------------------------

def box_targets(box: BoundingBox3D) -> np.ndarray:
    return np.concatenate([box.center, np.log(box.size), [np.sin(box.heading), np.cos(box.heading)], box.velocity])


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))


def focal_cost(logits: np.ndarray, classes: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """(n_pred, n_gt) classification cost used for matching."""
    p = _sigmoid(logits)
    eps = 1e-12
    neg = (1 - alpha) * p ** gamma * -np.log(1 - p + eps)
    pos = alpha * (1 - p) ** gamma * -np.log(p + eps)
    return (pos - neg)[:, classes]


def match_cost(logits: np.ndarray, reg: np.ndarray, gt_classes: np.ndarray, gt_reg: np.ndarray,
               cfg: TrackerConfig) -> np.ndarray:
    cls = focal_cost(logits, gt_classes, cfg.focal_alpha, cfg.focal_gamma)
    l1 = np.abs(reg[:, None, :] - gt_reg[None, :, :]).sum(axis=2)
    return cfg.cls_weight * cls + cfg.box_weight * l1


def hungarian(cost: np.ndarray) -> list:
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


def train_match(logits: np.ndarray, reg: np.ndarray, track_gt_ids: list, gts: list, cfg: TrackerConfig) -> np.ndarray:
    """Assign ground truth to queries.

    ``track_gt_ids`` lists the sticky object id of each track query (``None``
    for false-positive tracks); the remaining rows are detection queries.
    Returns ``target[i]`` = index into ``gts`` or -1 for background.
    """
    n = logits.shape[0]
    m = len(track_gt_ids)
    target = -np.ones(n, dtype=np.int64)
    index_of = {g.persistent_id: j for j, g in enumerate(gts)}
    claimed = set()
    for i, pid in enumerate(track_gt_ids):
        if pid is not None and pid in index_of:
            target[i] = index_of[pid]
            claimed.add(index_of[pid])
    free = [j for j in range(len(gts)) if j not in claimed]
    if free and n > m:
        gt_cls = np.array([gts[j].box.class_id for j in free])
        gt_reg = np.stack([box_targets(gts[j].box) for j in free])
        cost = match_cost(logits[m:], reg[m:], gt_cls, gt_reg, cfg)
        for r, c in hungarian(cost):
            target[m + r] = free[c]
    return target


def focal_loss(logits: Tensor, labels: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Summed sigmoid focal loss; ``labels`` is a 0/1 array shaped like ``logits``."""
    sign = Tensor(1.0 - 2.0 * labels)
    signed = gt.mul(logits, sign)
    alpha_t = Tensor(np.where(labels > 0, alpha, 1.0 - alpha))
    modulator = gt.exp(gt.scale(gt.log_sigmoid(signed), gamma))
    return gt.sum_(gt.mul(alpha_t, gt.mul(modulator, gt.softplus(signed))))


def frame_loss(out: DecoderOutput, target: np.ndarray, gts: list, cfg: TrackerConfig) -> Tensor:
    n, c = out.last.logits.shape
    labels = np.zeros((n, c))
    matched = np.where(target >= 0)[0]
    for i in matched:
        labels[i, gts[target[i]].box.class_id] = 1.0
    norm = max(len(matched), 1)
    total = None
    reg_target = np.stack([box_targets(gts[target[i]].box) for i in matched]) if len(matched) else None
    for layer in out.layers:
        loss = gt.scale(focal_loss(layer.logits, labels, cfg.focal_alpha, cfg.focal_gamma), cfg.cls_weight / norm)
        if len(matched):
            diff = gt.sub(gt.gather_rows(layer.reg, matched), Tensor(reg_target))
            loss = gt.add(loss, gt.scale(gt.sum_(gt.abs_(diff)), cfg.box_weight / norm))
        total = loss if total is None else gt.add(total, loss)
    return total


# -- augmentation -------------------------------------------------------------------------

def augment(tracks: list, rng: np.random.Generator, p_drop: float, p_fp: float, fp_pool: list | None = None) -> list:
    """Drop each track with ``p_drop``; for each kept track add, with ``p_fp``,
    a false-positive track drawn from ``fp_pool`` (unmatched detections)."""
    pool = list(fp_pool or [])
    kept = [t for t in tracks if not (p_drop > 0 and rng.random() < p_drop)]
    out = list(kept)
    if p_fp > 0:
        for _ in kept:
            if pool and rng.random() < p_fp:
                j = int(rng.integers(len(pool)))
                out.append(replace(pool.pop(j), is_fp=True, gt_id=None, state=ACTIVE))
    return out


# -- rollouts -------------------------------------------------------------------------------

def _tokens(scene: Scene, k: int, d: int) -> TokenSet:
    return TokenSet.from_tokens(scene.frames[k].sensor_tokens, d)


def run_sequence(scene: Scene, model: TrackerModel, mode: str = "eval", start: int = 0, length: int | None = None,
                 rng: np.random.Generator | None = None, freezer=None, record: list | None = None):
    """Roll the tracker over ``scene.frames[start:start+length]``.

    ``mode="eval"`` returns a ``TrackingResult``; ``mode="train"`` returns
    ``(loss, TrackingResult)`` with the loss summed over frames. ``record``, if
    given, collects per-track (frame, track_id, latent, ref) rows for building
    latent-motion datasets.
    """
    if len(scene.frames) == 0:
        raise EmptyScene("scene has no frames")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    stop = len(scene.frames) if length is None else min(len(scene.frames), start + length)
    if mode == "train":
        return _run_train(scene, model, start, stop, rng or np.random.default_rng(0), freezer or _passthrough)
    with gt.no_grad():
        return _run_eval(scene, model, start, stop, record)


def _run_eval(scene: Scene, model: TrackerModel, start: int, stop: int, record: list | None) -> TrackingResult:
    cfg = model.cfg
    d = cfg.decoder.d_l
    ids = IdAllocator()
    tracks: list = []
    frames = []
    for k in range(start, stop):
        if k > start and tracks:
            tracks = predict_step(tracks, scene.ego_motion(k), scene.dt, model)
        tokens = _tokens(scene, k, d)
        queries, refs = frame_queries(tracks, model, tokens)
        out = update_step(queries, refs, tokens, model)
        last = out.last
        scores = scores_from_logits(last.logits.data)
        boxes = boxes_from_reg(last.reg.data, last.logits.data)
        latents = out.latents.data
        candidates = []
        for i in range(queries.shape[0]):
            if i < len(tracks):
                base = tracks[i]
            else:
                base = ObjectQuery(q=None, ref=refs[i], state=NEWBORN)
            refined = replace(base, q=Tensor(latents[i]), ref=boxes[i].center.copy(),
                              velocity=boxes[i].velocity.copy(), box=boxes[i])
            candidates.append((base, refined))
        refined_list = [r for _, r in candidates]
        survivors = lifecycle(refined_list, scores, cfg.tracker, ids, cfg.tracker.dup_radius)
        nxt, emitted = [], []
        # inactive tracks keep their propagated state rather than the decoder's refinement
        for src_idx, trk in zip(_survivor_sources(refined_list, survivors), survivors):
            if trk.state == INACTIVE:
                base = candidates[src_idx][0]
                trk = replace(trk, q=base.q, ref=base.ref, velocity=base.velocity, box=base.box)
            else:
                emitted.append((trk.track_id, replace(trk.box, score=float(np.clip(trk.score, 0.0, 1.0)))))
            nxt.append(trk)
        if record is not None:
            for trk in nxt:
                if trk.state == ACTIVE:
                    record.append((k, trk.track_id, trk.q.data.copy(), trk.ref.copy(), trk.velocity.copy()))
        tracks = nxt
        frames.append(emitted)
    return TrackingResult(frames)


def _survivor_sources(candidates: list, survivors: list) -> list:
    """Index of the candidate each lifecycle survivor came from (order is preserved)."""
    out, j = [], 0
    for s in survivors:
        while candidates[j].q is not s.q:
            j += 1
        out.append(j)
        j += 1
    return out


def _run_train(scene: Scene, model: TrackerModel, start: int, stop: int, rng: np.random.Generator, frz):
    cfg = model.cfg
    tcfg = cfg.tracker
    d = cfg.decoder.d_l
    tracks: list = []
    total = None
    frames = []
    ids = IdAllocator()
    for k in range(start, stop):
        if k > start and tracks:
            tracks = predict_step(tracks, scene.ego_motion(k), scene.dt, model)
        gts = scene.frames[k].visible_objects()
        tokens = _tokens(scene, k, d)
        queries, refs = frame_queries(tracks, model, tokens)
        out = update_step(queries, refs, tokens, model)
        m = len(tracks)
        target = frz(("match", k), lambda: train_match(out.last.logits.data, out.last.reg.data,
                                                         [t.gt_id for t in tracks], gts, tcfg))
        loss = frame_loss(out, target, gts, tcfg)
        total = loss if total is None else gt.add(total, loss)
        reg = frz(("reg", k), lambda: out.last.reg.data.copy())
        logits = out.last.logits.data
        scores = scores_from_logits(logits)
        boxes = boxes_from_reg(reg, logits)
        nxt, emitted = [], []
        for i, trk in enumerate(tracks):
            if target[i] >= 0:
                nxt.append(replace(trk, q=out.latents[i], ref=reg[i, 0:3].copy(), velocity=reg[i, 8:10].copy(),
                                   state=ACTIVE, age=0, score=float(scores[i]), box=boxes[i]))
                emitted.append((trk.track_id, boxes[i]))
            elif not trk.is_fp and trk.age + 1 <= tcfg.max_inactive:
                nxt.append(replace(trk, state=INACTIVE, age=trk.age + 1, score=float(scores[i])))
        pool = []
        for i in range(m, queries.shape[0]):
            if target[i] >= 0:
                tid = ids()
                nxt.append(ObjectQuery(out.latents[i], reg[i, 0:3].copy(), reg[i, 8:10].copy(), 0.0, tid, ACTIVE, 0,
                                       float(scores[i]), boxes[i], gts[target[i]].persistent_id))
                emitted.append((tid, boxes[i]))
            else:
                pool.append(ObjectQuery(out.latents[i], reg[i, 0:3].copy(), reg[i, 8:10].copy(), 0.0, None, NEWBORN,
                                        0, float(scores[i]), boxes[i]))
        frames.append(emitted)
        if k + 1 < stop:
            tracks = augment(nxt, rng, tcfg.p_drop, tcfg.p_fp, pool)
    return total, TrackingResult(frames)
