"""Synthetic 3D scenes with a known pose-dependent appearance law.

A scene is a sequence of frames observed from a moving ego vehicle. Objects
follow constant-velocity or constant-turn dynamics in the world frame, are
hidden during scripted occlusion windows, and emit at most one noisy sensor
token per frame. Each token carries a feature vector produced by
``appearance``: the object's base feature rotated block-wise by angles that
are linear in the object's yaw relative to the ego and in its log-distance.
Clutter tokens carry random features.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import BoundingBox3D
from .config import InvalidConfig, RunConfig, SimConfig
from .geometry import SE3Transform, rot_z, wrap_angle

CLASS_SIZES = np.array([[1.9, 4.6, 1.7], [0.7, 0.8, 1.8], [2.5, 10.0, 3.2]])


@dataclass(frozen=True)
class AppearanceLaw:
    """Block-diagonal 2x2 rotations with angle ``yaw_mult*yaw + dist_coef*log1p(dist)``."""

    yaw_mult: np.ndarray
    dist_coef: np.ndarray
    noise: float = 0.0

    @property
    def dim(self) -> int:
        return 2 * len(self.yaw_mult)

    @classmethod
    def from_config(cls, cfg: SimConfig) -> "AppearanceLaw":
        rng = np.random.default_rng(cfg.law_seed)
        n = cfg.d_a // 2
        choices = np.array([k for k in range(-cfg.law_yaw_max, cfg.law_yaw_max + 1) if k != 0] or [0])
        yaw_mult = rng.choice(choices, size=n).astype(np.float64)
        dist_coef = rng.uniform(-cfg.law_dist_coef, cfg.law_dist_coef, size=n)
        return cls(yaw_mult, dist_coef, cfg.appearance_noise)

    def angles(self, rel_pose: SE3Transform) -> np.ndarray:
        dist = float(np.linalg.norm(rel_pose.translation))
        return self.yaw_mult * rel_pose.yaw + self.dist_coef * np.log1p(dist)

    def matrix(self, rel_pose: SE3Transform) -> np.ndarray:
        return block_rotation(self.angles(rel_pose))

    def to_dict(self) -> dict:
        return {"yaw_mult": self.yaw_mult.tolist(), "dist_coef": self.dist_coef.tolist(), "noise": self.noise}

    @classmethod
    def from_dict(cls, d: dict) -> "AppearanceLaw":
        return cls(np.asarray(d["yaw_mult"], dtype=np.float64), np.asarray(d["dist_coef"], dtype=np.float64),
                   float(d["noise"]))


def rotate_blocks(vec: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate consecutive pairs ``(v[2j], v[2j+1])`` by ``angles[j]``; works on (..., d)."""
    v = np.asarray(vec, dtype=np.float64)
    pairs = v.reshape(v.shape[:-1] + (-1, 2))
    c, s = np.cos(angles), np.sin(angles)
    out = np.stack([c * pairs[..., 0] - s * pairs[..., 1], s * pairs[..., 0] + c * pairs[..., 1]], axis=-1)
    return out.reshape(v.shape)


def block_rotation(angles: np.ndarray) -> np.ndarray:
    n = len(angles)
    mat = np.zeros((2 * n, 2 * n))
    for j, a in enumerate(angles):
        c, s = np.cos(a), np.sin(a)
        mat[2 * j:2 * j + 2, 2 * j:2 * j + 2] = [[c, -s], [s, c]]
    return mat


def appearance(law: AppearanceLaw, base: np.ndarray, rel_pose: SE3Transform,
               rng: np.random.Generator | None = None, noise: float | None = None) -> np.ndarray:
    sigma = law.noise if noise is None else noise
    feat = rotate_blocks(base, law.angles(rel_pose))
    if sigma > 0:
        if rng is None:
            raise ValueError("a random generator is required when appearance noise is on")
        feat = feat + rng.normal(scale=sigma, size=feat.shape)
    return feat


@dataclass
class GTObject:
    persistent_id: int
    box: BoundingBox3D
    appearance: np.ndarray
    visible: bool
    world_center: np.ndarray
    world_heading: float
    world_velocity: np.ndarray
    turn_rate: float = 0.0


@dataclass
class SensorToken:
    position: np.ndarray
    velocity: np.ndarray
    feature: np.ndarray
    is_clutter: bool
    source_id: int = -1
    confidence: float = 1.0


@dataclass
class Frame:
    ego_pose: SE3Transform
    gt_objects: list
    sensor_tokens: list = field(default_factory=list)

    def visible_objects(self) -> list:
        return [o for o in self.gt_objects if o.visible]


@dataclass
class Scene:
    frames: list
    dt: float = 0.5
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def ego_motion(self, k: int) -> SE3Transform:
        """Transform from ego frame ``k-1`` to ego frame ``k``."""
        return self.frames[k].ego_pose @ self.frames[k - 1].ego_pose.inverse()

    @property
    def law(self) -> AppearanceLaw:
        return AppearanceLaw.from_dict(self.meta["law"])


@dataclass
class _Track:
    pid: int
    class_id: int
    size: np.ndarray
    base: np.ndarray
    birth: int
    positions: list
    headings: list
    velocities: list
    turn_rate: float
    hidden: set


def _ego_trajectory(cfg: SimConfig, rng: np.random.Generator):
    pos = np.zeros(2)
    yaw = rng.uniform(-np.pi, np.pi)
    yaw_rate = 0.0
    poses = []
    for _ in range(cfg.num_frames):
        poses.append((pos.copy(), yaw))
        yaw_rate = float(np.clip(yaw_rate + rng.normal(scale=cfg.ego_yaw_rate_std),
                                 -cfg.ego_yaw_rate_max, cfg.ego_yaw_rate_max))
        pos = pos + cfg.dt * cfg.ego_speed * np.array([np.cos(yaw), np.sin(yaw)])
        yaw = yaw + yaw_rate
    return poses


def _spawn(cfg: SimConfig, rng: np.random.Generator, pid: int, ego_poses, tracks: list) -> _Track:
    n = cfg.num_frames
    birth = 0
    if n > 2 and rng.random() < cfg.late_birth_fraction:
        birth = int(rng.integers(1, max(2, n // 2)))
    ego_pos, ego_yaw = ego_poses[birth]
    alive = [t for t in tracks if t.birth <= birth]
    class_id = int(rng.integers(cfg.num_classes))
    size = CLASS_SIZES[class_id] * rng.uniform(0.9, 1.1, size=3)
    if alive and rng.random() < cfg.pair_fraction:
        # companion: travels beside an existing object at a similar velocity
        mate = alive[int(rng.integers(len(alive)))]
        k = birth - mate.birth
        mate_pos, mate_vel = mate.positions[k], mate.velocities[k]
        heading = mate.headings[k]
        side = np.array([-np.sin(heading), np.cos(heading)]) * rng.choice([-1.0, 1.0])
        start = mate_pos + side * cfg.pair_gap * rng.uniform(0.8, 1.3)
        velocity = mate_vel + rng.normal(scale=0.2, size=2)
        turn_rate = mate.turn_rate
    else:
        radius = cfg.spawn_radius * np.sqrt(rng.uniform(0.04, 1.0))
        bearing = rng.uniform(-np.pi, np.pi)
        start = ego_pos + radius * np.array([np.cos(bearing + ego_yaw), np.sin(bearing + ego_yaw)])
        speed = rng.uniform(0.0, cfg.speed_max)
        direction = rng.uniform(-np.pi, np.pi)
        velocity = speed * np.array([np.cos(direction), np.sin(direction)])
        turn_rate = 0.0
        if rng.random() < cfg.turning_fraction:
            turn_rate = float(rng.uniform(-cfg.turn_rate_max, cfg.turn_rate_max))
    speed = float(np.linalg.norm(velocity))
    heading0 = float(np.arctan2(velocity[1], velocity[0])) if speed > 1e-6 else float(rng.uniform(-np.pi, np.pi))
    positions, headings, velocities = [], [], []
    pos = np.asarray(start, dtype=np.float64)
    heading = heading0
    vel = np.asarray(velocity, dtype=np.float64)
    for k in range(n - birth):
        if turn_rate == 0.0:
            positions.append(start + k * cfg.dt * vel)
            headings.append(heading0)
            velocities.append(vel.copy())
        else:
            positions.append(pos.copy())
            headings.append(heading)
            velocities.append(speed * np.array([np.cos(heading), np.sin(heading)]))
            pos = pos + cfg.dt * velocities[-1]
            heading = heading + turn_rate
    hidden = set()
    if rng.random() < cfg.occlusion_rate and n - birth > 2:
        length = int(rng.integers(cfg.occlusion_min, cfg.occlusion_max + 1))
        start_k = int(rng.integers(birth + 1, max(birth + 2, n - 1)))
        hidden.update(range(start_k, min(start_k + length, n)))
    base = rng.normal(size=cfg.d_a)
    return _Track(pid, class_id, size, base, birth, positions, headings, velocities, turn_rate, hidden)


def check_sim_config(cfg: SimConfig):
    if cfg.num_objects < 0:
        raise InvalidConfig("sim.num_objects", "must be non-negative")
    if cfg.num_frames < 1:
        raise InvalidConfig("sim.num_frames", "need at least one frame")
    if cfg.dt <= 0:
        raise InvalidConfig("sim.dt", "must be positive")
    if cfg.d_a % 2:
        raise InvalidConfig("sim.d_a", "must be even")
    if not 0.0 <= cfg.p_miss <= 1.0:
        raise InvalidConfig("sim.p_miss", "must lie in [0, 1]")
    if cfg.occlusion_min < 1 or cfg.occlusion_max < cfg.occlusion_min:
        raise InvalidConfig("sim.occlusion_max", "need 1 <= occlusion_min <= occlusion_max")
    if cfg.clutter_rate < 0 or cfg.pos_noise < 0 or cfg.vel_noise < 0 or cfg.appearance_noise < 0:
        raise InvalidConfig("sim.clutter_rate", "rates and noise levels must be non-negative")
    for name in ("conf_object", "conf_clutter"):
        if not 0.0 < getattr(cfg, name) < 1.0:
            raise InvalidConfig(f"sim.{name}", "must lie strictly between 0 and 1")
    if cfg.num_classes < 1 or cfg.num_classes > len(CLASS_SIZES):
        raise InvalidConfig("sim.num_classes", f"must be between 1 and {len(CLASS_SIZES)}")


def gen_scene(cfg: SimConfig | RunConfig, seed: int) -> Scene:
    if isinstance(cfg, RunConfig):
        cfg = cfg.sim
    check_sim_config(cfg)
    rng = np.random.default_rng(seed)
    law = AppearanceLaw.from_config(cfg)
    ego = _ego_trajectory(cfg, rng)
    tracks: list = []
    for pid in range(cfg.num_objects):
        tracks.append(_spawn(cfg, rng, pid, ego, tracks))
    frames = []
    for k in range(cfg.num_frames):
        ego_pos, ego_yaw = ego[k]
        world_to_ego = SE3Transform(rot_z(ego_yaw), [ego_pos[0], ego_pos[1], 0.0]).inverse()
        gts = []
        for tr in tracks:
            if k < tr.birth:
                continue
            j = k - tr.birth
            wc = np.array([tr.positions[j][0], tr.positions[j][1], tr.size[2] / 2.0])
            center = world_to_ego.apply(wc)
            rel_heading = wrap_angle(tr.headings[j] - ego_yaw)
            vel_ego = world_to_ego.rotation[:2, :2] @ tr.velocities[j]
            in_range = float(np.linalg.norm(center[:2])) <= cfg.sensor_range
            rel_pose = SE3Transform(rot_z(rel_heading), center)
            box = BoundingBox3D(center, tr.size, rel_heading, vel_ego, 1.0, tr.class_id)
            gts.append(GTObject(tr.pid, box, appearance(law, tr.base, rel_pose, noise=0.0),
                                in_range and k not in tr.hidden, wc, float(tr.headings[j]),
                                np.asarray(tr.velocities[j], dtype=np.float64), tr.turn_rate))
        frames.append(Frame(world_to_ego, gts))
    scene = Scene(frames, cfg.dt, {"seed": int(seed), "config_hash": sim_hash(cfg), "law": law.to_dict(),
                                   "d_a": cfg.d_a})
    for k in range(cfg.num_frames):
        frames[k].sensor_tokens = render_frame(scene, k, cfg, rng)
    return scene


def _confidence(rng: np.random.Generator, mean: float, concentration: float) -> float:
    """Detector-style confidence: Beta with the given mean; 1.0 when concentration is 0."""
    if concentration <= 0:
        return 1.0
    return float(rng.beta(mean * concentration, (1.0 - mean) * concentration))


def render_frame(scene: Scene, t: int, noise_cfg: SimConfig, rng: np.random.Generator) -> list:
    """Noisy tokens for the visible objects of frame ``t`` plus Poisson clutter."""
    frame = scene.frames[t]
    law = AppearanceLaw.from_dict(scene.meta["law"])
    d_a = law.dim
    tokens = []
    visible = frame.visible_objects()
    for obj in visible:
        if rng.random() < noise_cfg.p_miss:
            continue
        pos = obj.box.center.copy()
        if noise_cfg.pos_noise > 0:
            pos[:2] += rng.normal(scale=noise_cfg.pos_noise, size=2)
        vel = obj.box.velocity.copy()
        if noise_cfg.vel_noise > 0:
            vel += rng.normal(scale=noise_cfg.vel_noise, size=2)
        feat = obj.appearance.copy()
        if noise_cfg.appearance_noise > 0:
            feat += rng.normal(scale=noise_cfg.appearance_noise, size=d_a)
        tokens.append(SensorToken(pos, vel, feat, False, obj.persistent_id,
                                  _confidence(rng, noise_cfg.conf_object, noise_cfg.conf_concentration)))
    n_clutter = int(rng.poisson(noise_cfg.clutter_rate)) if noise_cfg.clutter_rate > 0 else 0
    for _ in range(n_clutter):
        if visible and rng.random() < noise_cfg.clutter_near_fraction:
            anchor = visible[int(rng.integers(len(visible)))].box.center
            offset = rng.normal(size=2)
            offset *= noise_cfg.clutter_near_radius * rng.uniform(0.3, 1.0) / max(np.linalg.norm(offset), 1e-9)
            pos = np.array([anchor[0] + offset[0], anchor[1] + offset[1], anchor[2]])
        else:
            r = noise_cfg.sensor_range * np.sqrt(rng.uniform())
            b = rng.uniform(-np.pi, np.pi)
            pos = np.array([r * np.cos(b), r * np.sin(b), rng.uniform(0.3, 1.0)])
        vel = rng.normal(scale=2.0, size=2)
        tokens.append(SensorToken(pos, vel, rng.normal(size=d_a), True, -1,
                                  _confidence(rng, noise_cfg.conf_clutter, noise_cfg.conf_concentration)))
    order = rng.permutation(len(tokens))
    return [tokens[i] for i in order]


def sim_hash(cfg: SimConfig) -> str:
    text = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- serialization ---------------------------------------------------------

def _pose_dict(p: SE3Transform) -> dict:
    return {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}


def _frame_to_dict(k: int, f: Frame) -> dict:
    return {
        "frame_idx": k,
        "ego_pose": _pose_dict(f.ego_pose),
        "gt_objects": [
            {
                "persistent_id": o.persistent_id,
                "box": o.box.as_vector().tolist(),
                "class": o.box.class_id,
                "appearance": o.appearance.tolist(),
                "visible": o.visible,
                "world_center": o.world_center.tolist(),
                "world_heading": o.world_heading,
                "world_velocity": o.world_velocity.tolist(),
                "turn_rate": o.turn_rate,
            }
            for o in f.gt_objects
        ],
        "sensor_tokens": [
            {
                "position": t.position.tolist(),
                "velocity": t.velocity.tolist(),
                "feature": t.feature.tolist(),
                "is_clutter": t.is_clutter,
                "source_id": t.source_id,
                "confidence": t.confidence,
            }
            for t in f.sensor_tokens
        ],
    }


def _frame_from_dict(d: dict) -> Frame:
    pose = SE3Transform(np.array(d["ego_pose"]["rotation"]), np.array(d["ego_pose"]["translation"]))
    gts = [
        GTObject(
            o["persistent_id"],
            BoundingBox3D.from_vector(o["box"], 1.0, o["class"]),
            np.array(o["appearance"], dtype=np.float64),
            bool(o["visible"]),
            np.array(o["world_center"], dtype=np.float64),
            float(o["world_heading"]),
            np.array(o["world_velocity"], dtype=np.float64),
            float(o["turn_rate"]),
        )
        for o in d["gt_objects"]
    ]
    toks = [
        SensorToken(np.array(t["position"], dtype=np.float64), np.array(t["velocity"], dtype=np.float64),
                    np.array(t["feature"], dtype=np.float64), bool(t["is_clutter"]), int(t["source_id"]),
                    float(t.get("confidence", 1.0)))
        for t in d["sensor_tokens"]
    ]
    return Frame(pose, gts, toks)


def scene_to_jsonl(scene: Scene) -> str:
    lines = [json.dumps({"meta": {**scene.meta, "dt": scene.dt, "num_frames": len(scene.frames)}}, sort_keys=True)]
    lines += [json.dumps(_frame_to_dict(k, f), sort_keys=True) for k, f in enumerate(scene.frames)]
    return "\n".join(lines) + "\n"


def scene_from_jsonl(text: str) -> Scene:
    rows = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
    meta = dict(rows[0]["meta"])
    dt = float(meta.pop("dt"))
    meta.pop("num_frames", None)
    frames = [_frame_from_dict(r) for r in rows[1:]]
    return Scene(frames, dt, meta)


def save_scene(scene: Scene, path):
    Path(path).write_text(scene_to_jsonl(scene))


def load_scene(path) -> Scene:
    return scene_from_jsonl(Path(path).read_text())


def gen_scenes(cfg: SimConfig | RunConfig, seed: int, count: int | None = None) -> list:
    """Scenes with per-scene seeds spawned from one root seed."""
    sim = cfg.sim if isinstance(cfg, RunConfig) else cfg
    n = sim.num_scenes if count is None else count
    children = np.random.SeedSequence(seed).spawn(n)
    return [gen_scene(sim, int(c.generate_state(1)[0])) for c in children]


def appearance_pairs(scenes: list, max_pairs: int | None = None):
    """Noise-free appearance of each object in consecutive frames with the exact
    object motion (expressed in the earlier ego frame) and ego motion between them.

    Returns a ``LatentDataset`` for fitting the latent motion model to the law.
    """
    from .lmm import LatentDataset

    q0, q1, t_obj, t_ego = [], [], [], []
    for scene in scenes:
        for k in range(len(scene.frames) - 1):
            ego = scene.ego_motion(k + 1)
            nxt = {o.persistent_id: o for o in scene.frames[k + 1].gt_objects}
            for obj in scene.frames[k].gt_objects:
                o1 = nxt.get(obj.persistent_id)
                if o1 is None:
                    continue
                p0 = SE3Transform(rot_z(obj.box.heading), obj.box.center)
                p1 = SE3Transform(rot_z(o1.box.heading), o1.box.center)
                q0.append(obj.appearance)
                q1.append(o1.appearance)
                t_obj.append(ego.inverse() @ p1 @ p0.inverse())
                t_ego.append(ego)
    if max_pairs is not None:
        q0, q1, t_obj, t_ego = q0[:max_pairs], q1[:max_pairs], t_obj[:max_pairs], t_ego[:max_pairs]
    d = scenes[0].meta["d_a"] if scenes else 0
    return LatentDataset(np.array(q0).reshape(-1, d), t_obj, t_ego, np.array(q1).reshape(-1, d))
