"""Run configuration: nested dataclasses addressed by ``section.field`` paths.

The on-disk format is one ``section.field = value`` assignment per line.
Values are JSON literals; bare words are read as strings. ``#`` starts a
comment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class InvalidConfig(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass
class DecoderConfig:
    num_layers: int = 2
    d_l: int = 64
    h: int = 4
    num_det_queries: int = 24
    ffn_width: int = 128
    num_classes: int = 1
    pos_freqs: int = 8
    max_range: float = 40.0
    track_embedding: bool = True
    # "token": one detection query per sensor token (top-k by confidence); "learned": fixed anchors
    det_query_mode: str = "token"


@dataclass
class LmmConfig:
    enabled: bool = True
    # width of the transformed latent; 0 means "same as the decoder latent"
    d_l: int = 0
    h: int = 4
    variant: str = "multi_head"
    apply_mode: str = "separate"
    share_params: bool = True
    use_query_feature: bool = False
    hidden: int = 0
    trans_scale: float = 10.0
    init_noise: float = 1e-3
    # make the identity pose map to K = I and zero offset
    anchor_identity: bool = True


@dataclass
class TrackerConfig:
    spawn_thresh: float = 0.4
    keep_thresh: float = 0.35
    max_inactive: int = 5
    # eval-time duplicate suppression radius in meters (0 disables)
    dup_radius: float = 1.0
    use_turn_rate: bool = False
    cls_weight: float = 2.0
    box_weight: float = 0.25
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    p_drop: float = 0.1
    p_fp: float = 0.3


@dataclass
class SimConfig:
    num_scenes: int = 200
    num_frames: int = 40
    dt: float = 0.5
    num_objects: int = 6
    num_classes: int = 1
    d_a: int = 64
    spawn_radius: float = 25.0
    sensor_range: float = 40.0
    speed_max: float = 5.0
    turning_fraction: float = 0.3
    turn_rate_max: float = 0.15
    late_birth_fraction: float = 0.3
    pair_fraction: float = 0.4
    pair_gap: float = 2.5
    occlusion_rate: float = 0.4
    occlusion_min: int = 1
    occlusion_max: int = 4
    pos_noise: float = 0.3
    vel_noise: float = 0.3
    p_miss: float = 0.1
    clutter_rate: float = 2.0
    clutter_near_fraction: float = 0.5
    clutter_near_radius: float = 2.5
    appearance_noise: float = 0.1
    conf_object: float = 0.7
    conf_clutter: float = 0.35
    conf_concentration: float = 8.0
    law_seed: int = 7
    law_yaw_max: int = 3
    law_dist_coef: float = 0.3
    ego_speed: float = 3.0
    ego_yaw_rate_std: float = 0.1
    ego_yaw_rate_max: float = 0.3


@dataclass
class TrainConfig:
    epochs: int = 1
    window: int = 3
    lr: float = 2e-4
    min_lr: float = 0.0
    warmup: int = 0
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    max_steps: int = 0
    windows_per_scene: int = 0
    # learning-rate multiplier for latent motion model parameters during tracking training
    lmm_lr_scale: float = 1.0
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 64


@dataclass
class EvalConfig:
    dist_thresh: float = 2.0
    n_thresholds: int = 40
    workers: int = 1


@dataclass
class RunConfig:
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    lmm: LmmConfig = field(default_factory=LmmConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def copy(self) -> "RunConfig":
        return from_text(to_text(self))

    def set(self, path: str, value) -> "RunConfig":
        set_field(self, path, value)
        return self

    def hash(self) -> str:
        return _digest(to_text(self))

    def model_hash(self) -> str:
        """Hash of the sections that determine parameter shapes and behaviour."""
        lines = [ln for ln in to_text(self).splitlines() if ln.split(".", 1)[0] in ("decoder", "lmm", "tracker")]
        return _digest("\n".join(lines))


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(path: str, current, value):
    if isinstance(current, bool):
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
            return value.lower() in ("true", "yes", "1")
        if not isinstance(value, bool):
            raise InvalidConfig(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise InvalidConfig(path, f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfig(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        return str(value)
    raise InvalidConfig(path, "not a settable field")


def set_field(cfg: RunConfig, path: str, value):
    parts = path.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, part):
            raise InvalidConfig(path, "unknown config section")
        obj = getattr(obj, part)
    name = parts[-1]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
        raise InvalidConfig(path, "unknown config field")
    current = getattr(obj, name)
    if dataclasses.is_dataclass(current):
        raise InvalidConfig(path, "cannot assign a whole section")
    if isinstance(value, str) and (not isinstance(current, str) or value.strip().startswith('"')):
        value = _parse_value(value)
    setattr(obj, name, _coerce(path, current, value))


def get_field(cfg: RunConfig, path: str):
    obj = cfg
    for part in path.split("."):
        if not hasattr(obj, part):
            raise InvalidConfig(path, "unknown config field")
        obj = getattr(obj, part)
    return obj


def iter_fields(cfg: RunConfig, prefix: str = ""):
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        path = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from iter_fields(value, path + ".")
        else:
            yield path, value


def to_text(cfg: RunConfig) -> str:
    return "\n".join(f"{path} = {json.dumps(value)}" for path, value in iter_fields(cfg)) + "\n"


def from_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        set_field(cfg, key.strip(), raw.strip())
    validate(cfg)
    return cfg


def load(path) -> RunConfig:
    return from_text(Path(path).read_text())


def lmm_width(cfg: RunConfig) -> int:
    return cfg.lmm.d_l or cfg.decoder.d_l


def validate(cfg: RunConfig) -> RunConfig:
    d, l, t, s, tr, ev = cfg.decoder, cfg.lmm, cfg.tracker, cfg.sim, cfg.train, cfg.eval
    for path, value in iter_fields(cfg):
        if isinstance(value, float) and value != value:
            raise InvalidConfig(path, "must not be NaN")
    if d.d_l <= 0 or d.h <= 0 or d.d_l % d.h:
        raise InvalidConfig("decoder.h", f"h={d.h} must divide d_l={d.d_l}")
    if d.num_layers < 1:
        raise InvalidConfig("decoder.num_layers", "need at least one decoder layer")
    if d.num_det_queries < 1:
        raise InvalidConfig("decoder.num_det_queries", "need at least one detection query")
    if d.num_classes < 1:
        raise InvalidConfig("decoder.num_classes", "need at least one class")
    if d.det_query_mode not in ("token", "learned"):
        raise InvalidConfig("decoder.det_query_mode", f"unknown mode {d.det_query_mode!r}")
    if l.variant not in ("multi_head", "full_rank"):
        raise InvalidConfig("lmm.variant", f"unknown variant {l.variant!r}")
    if l.apply_mode not in ("separate", "merged"):
        raise InvalidConfig("lmm.apply_mode", f"unknown apply mode {l.apply_mode!r}")
    width = lmm_width(cfg)
    if width < 0 or l.d_l < 0:
        raise InvalidConfig("lmm.d_l", "must be non-negative")
    if l.variant == "multi_head" and (l.h <= 0 or width % l.h):
        raise InvalidConfig("lmm.h", f"h={l.h} must divide lmm latent width {width}")
    if l.trans_scale <= 0:
        raise InvalidConfig("lmm.trans_scale", "must be positive")
    for name in ("spawn_thresh", "keep_thresh", "p_drop", "p_fp", "focal_alpha"):
        v = getattr(t, name)
        if not 0.0 <= v <= 1.0:
            raise InvalidConfig(f"tracker.{name}", f"must lie in [0, 1], got {v}")
    if t.max_inactive < 0:
        raise InvalidConfig("tracker.max_inactive", "must be non-negative")
    if s.dt <= 0:
        raise InvalidConfig("sim.dt", "must be positive")
    if s.num_frames < 1:
        raise InvalidConfig("sim.num_frames", "need at least one frame")
    if s.num_objects < 0 or s.num_scenes < 0:
        raise InvalidConfig("sim.num_objects", "counts must be non-negative")
    if s.d_a != d.d_l or s.d_a % 2:
        raise InvalidConfig("sim.d_a", f"appearance dim {s.d_a} must be even and equal decoder.d_l={d.d_l}")
    if s.num_classes > d.num_classes:
        raise InvalidConfig("sim.num_classes", "more simulated classes than decoder classes")
    if not 0.0 <= s.p_miss <= 1.0:
        raise InvalidConfig("sim.p_miss", "must lie in [0, 1]")
    if s.occlusion_min < 1 or s.occlusion_max < s.occlusion_min:
        raise InvalidConfig("sim.occlusion_max", "need 1 <= occlusion_min <= occlusion_max")
    if s.clutter_rate < 0:
        raise InvalidConfig("sim.clutter_rate", "must be non-negative")
    if tr.window < 2:
        raise InvalidConfig("train.window", "training windows need at least two frames")
    if tr.epochs < 0:
        raise InvalidConfig("train.epochs", "must be non-negative")
    if ev.dist_thresh <= 0:
        raise InvalidConfig("eval.dist_thresh", "must be positive")
    if ev.n_thresholds < 2:
        raise InvalidConfig("eval.n_thresholds", "need at least two thresholds")
    return cfg


def default_config() -> RunConfig:
    return RunConfig()
