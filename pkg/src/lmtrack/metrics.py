"""CLEAR-MOT accumulation and recall-averaged AMOTA/AMOTP.

Definitions follow the nuScenes tracking devkit (which builds on
py-motmetrics): greedy center-distance matching with correspondence
continuity, IDS against the last matched hypothesis, FRAG as tracked to
untracked transitions, and MOTAR averaged over a sweep of recall targets.

A sequence is a list of frames; a frame is a list of ``Obs``. Functions take
one sequence or a list of sequences (scenes); ids are scene-local.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np


class FrameSetMismatch(ValueError):
    pass


class Obs(NamedTuple):
    id: int
    center: np.ndarray
    score: float = 1.0


@dataclass
class FrameMatching:
    pairs: list  # (pred_id, gt_id, distance)
    fp: list  # unmatched pred ids
    fn: list  # unmatched gt ids


def _dist(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def match_frame(preds: list, gts: list, dist_thresh: float = 2.0, prev: dict | None = None) -> FrameMatching:
    """Greedy one-to-one matching by ascending 2D center distance.

    ``prev`` maps gt id -> pred id of earlier correspondences; such pairs are
    kept first when still within the threshold.
    """
    if dist_thresh <= 0:
        raise ValueError("dist_thresh must be positive")
    used_p, used_g, pairs = set(), set(), []
    pred_by_id = {p.id: p for p in preds}
    if prev:
        for g in gts:
            pid = prev.get(g.id)
            if pid in pred_by_id and pid not in used_p:
                d = _dist(pred_by_id[pid].center, g.center)
                if d <= dist_thresh:
                    pairs.append((pid, g.id, d))
                    used_p.add(pid)
                    used_g.add(g.id)
    cand = []
    for i, p in enumerate(preds):
        if p.id in used_p:
            continue
        for j, g in enumerate(gts):
            if g.id in used_g:
                continue
            d = _dist(p.center, g.center)
            if d <= dist_thresh:
                cand.append((d, i, j))
    cand.sort()
    for d, i, j in cand:
        pid, gid = preds[i].id, gts[j].id
        if pid in used_p or gid in used_g:
            continue
        pairs.append((pid, gid, d))
        used_p.add(pid)
        used_g.add(gid)
    return FrameMatching(pairs, [p.id for p in preds if p.id not in used_p], [g.id for g in gts if g.id not in used_g])


@dataclass
class ClearMotCounts:
    num_gt: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    frag: int = 0
    mt: int = 0
    ml: int = 0
    num_trajectories: int = 0
    dist_sum: float = 0.0

    def __add__(self, other: "ClearMotCounts") -> "ClearMotCounts":
        return ClearMotCounts(*(a + b for a, b in zip(asdict(self).values(), asdict(other).values())))

    @property
    def recall(self) -> float:
        return self.tp / self.num_gt if self.num_gt else 0.0

    @property
    def mota(self) -> float:
        return 1.0 - (self.fn + self.fp + self.ids) / self.num_gt if self.num_gt else 0.0

    @property
    def motp(self) -> float:
        return self.dist_sum / self.tp if self.tp else float("nan")

    def summary(self) -> dict:
        return {"mota": self.mota, "ids": self.ids, "frag": self.frag, "mt": self.mt, "ml": self.ml,
                "recall": self.recall, "fp": self.fp, "fn": self.fn}


def _depth(x) -> int:
    """Nesting depth at which ``Obs`` entries appear (2 = sequence, 3 = list of sequences); 0 if empty."""
    for a in x:
        for b in a:
            if isinstance(b, Obs):
                return 2
            for _ in b:
                return 3
    return 0


def _as_scenes(results, gt) -> tuple[list, list]:
    depth = _depth(gt) or _depth(results) or 2
    if depth == 2:
        results, gt = [results], [gt]
    if len(results) != len(gt):
        raise FrameSetMismatch(f"{len(results)} result sequences vs {len(gt)} ground-truth sequences")
    for r, g in zip(results, gt):
        if len(r) != len(g):
            raise FrameSetMismatch(f"result covers {len(r)} frames, ground truth {len(g)}")
    return results, gt


def _sequence_counts(results: list, gt: list, dist_thresh: float, min_score: float | None = None):
    counts = ClearMotCounts()
    last_match: dict = {}  # gt id -> pred id of its most recent match
    tracked: dict = {}  # gt id -> list of matched flags over its lifetime
    tp_scores = []
    for preds, gts in zip(results, gt):
        if min_score is not None:
            preds = [p for p in preds if p.score >= min_score]
        m = match_frame(preds, gts, dist_thresh, last_match)
        score_of = {p.id: p.score for p in preds}
        matched = set()
        for pid, gid, d in m.pairs:
            if gid in last_match and last_match[gid] != pid:
                counts.ids += 1
            last_match[gid] = pid
            matched.add(gid)
            counts.dist_sum += d
            tp_scores.append(score_of[pid])
        for g in gts:
            tracked.setdefault(g.id, []).append(g.id in matched)
        counts.num_gt += len(gts)
        counts.tp += len(m.pairs)
        counts.fp += len(m.fp)
        counts.fn += len(m.fn)
    for flags in tracked.values():
        f = np.asarray(flags, dtype=bool)
        counts.num_trajectories += 1
        ratio = f.mean()
        counts.mt += int(ratio >= 0.8)
        counts.ml += int(ratio < 0.2)
        if f.any():
            first, last = np.flatnonzero(f)[[0, -1]]
            counts.frag += int(np.sum(np.diff(f[first:last + 1].astype(int)) == -1))
    return counts, tp_scores


def clearmot_counts(results, gt, dist_thresh: float = 2.0, min_score: float | None = None) -> tuple:
    results, gt = _as_scenes(results, gt)
    total, scores = ClearMotCounts(), []
    for r, g in zip(results, gt):
        c, s = _sequence_counts(r, g, dist_thresh, min_score)
        total = total + c
        scores.extend(s)
    return total, scores


def accumulate_clearmot(results, gt, dist_thresh: float = 2.0) -> dict:
    """MOTA, IDS, FRAG, MT, ML, recall, FP, FN over all predictions."""
    return clearmot_counts(results, gt, dist_thresh)[0].summary()


REPORT_FIELDS = ("amota", "amotp", "recall", "mota", "mt", "ml", "frag", "ids", "fp", "fn", "num_gt")

REPORT_SCHEMA = {
    "type": "object",
    "required": list(REPORT_FIELDS) + ["thresholds"],
    "properties": {
        "amota": {"type": "number", "minimum": 0, "maximum": 1},
        "amotp": {"type": "number", "minimum": 0},
        "recall": {"type": "number", "minimum": 0, "maximum": 1},
        "mota": {"type": "number", "maximum": 1},
        **{k: {"type": "integer", "minimum": 0} for k in ("mt", "ml", "frag", "ids", "fp", "fn", "num_gt")},
        "thresholds": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["target_recall", "score_thresh", "recall", "motar", "motp", "mota", "ids", "fp", "fn"],
            },
        },
    },
}


@dataclass
class MetricsReport:
    amota: float
    amotp: float
    recall: float
    mota: float
    mt: int
    ml: int
    frag: int
    ids: int
    fp: int
    fn: int
    num_gt: int
    thresholds: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        if not self.meta:
            out.pop("meta")
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_FIELDS}

    def thresholds_csv(self) -> str:
        buf = io.StringIO()
        if self.thresholds:
            w = csv.DictWriter(buf, fieldnames=list(self.thresholds[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(self.thresholds)
        return buf.getvalue()


def recall_targets(n_thresholds: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_thresholds)[1:]


def score_thresholds(tp_scores: list, num_gt: int, targets: np.ndarray) -> np.ndarray:
    """Score cutoff reaching each target recall; NaN where the target is unreachable."""
    out = np.full(len(targets), np.nan)
    if not tp_scores or num_gt == 0:
        return out
    scores = np.sort(np.asarray(tp_scores, dtype=np.float64))[::-1]
    recalls = np.arange(1, len(scores) + 1) / num_gt
    reachable = targets <= recalls[-1] + 1e-12
    out[reachable] = np.interp(targets[reachable], recalls, scores)
    return out


def motar(c: ClearMotCounts) -> float:
    """Recall-normalized MOTA at the achieved recall ``r = TP / P``."""
    if c.tp == 0 or c.num_gt == 0:
        return 0.0
    r = c.recall
    return max(0.0, 1.0 - (c.ids + c.fp + c.fn - (1.0 - r) * c.num_gt) / (r * c.num_gt))


def amota_amotp(results, gt, n_thresholds: int = 40, dist_thresh: float = 2.0) -> MetricsReport:
    """Sweep score cutoffs over recall targets and average MOTAR and matched distance.

    Unreachable recall targets contribute MOTAR 0 and distance ``dist_thresh``.
    Secondary metrics are read at the cutoff with the best MOTA.
    """
    if n_thresholds < 2:
        raise ValueError("n_thresholds must be at least 2")
    results, gt = _as_scenes(results, gt)
    full, tp_scores = clearmot_counts(results, gt, dist_thresh)
    targets = recall_targets(n_thresholds)
    cuts = score_thresholds(tp_scores, full.num_gt, targets)
    rows, motars, motps = [], [], []
    best = None
    cache = {}
    for r, cut in zip(targets, cuts):
        if np.isnan(cut):
            motars.append(0.0)
            motps.append(dist_thresh)
            rows.append({"target_recall": float(r), "score_thresh": None, "recall": 0.0, "motar": 0.0,
                         "motp": dist_thresh, "mota": 0.0, "ids": 0, "fp": 0, "fn": full.num_gt})
            continue
        if cut not in cache:
            cache[cut] = clearmot_counts(results, gt, dist_thresh, min_score=cut)[0]
        c = cache[cut]
        mr = motar(c)
        mp = c.motp if c.tp else dist_thresh
        motars.append(mr)
        motps.append(mp)
        rows.append({"target_recall": float(r), "score_thresh": float(cut), "recall": c.recall, "motar": mr,
                     "motp": mp, "mota": c.mota, "ids": c.ids, "fp": c.fp, "fn": c.fn})
        if best is None or (c.mota, c.recall) > (best.mota, best.recall):
            best = c
    sec = best if best is not None else full
    return MetricsReport(
        amota=float(np.mean(motars)), amotp=float(np.mean(motps)), recall=sec.recall, mota=sec.mota,
        mt=sec.mt, ml=sec.ml, frag=sec.frag, ids=sec.ids, fp=sec.fp, fn=sec.fn, num_gt=full.num_gt,
        thresholds=rows)


# -- adapters --------------------------------------------------------------------------

def gt_sequence(scene) -> list:
    """Visible ground truth of a simulated scene as a sequence of ``Obs``."""
    return [[Obs(o.persistent_id, o.box.center, 1.0) for o in f.visible_objects()] for f in scene.frames]


def result_sequence(result) -> list:
    """A ``TrackingResult`` as a sequence of ``Obs``."""
    return [[Obs(tid, box.center, box.score) for tid, box in frame] for frame in result.frames]
