"""Rigid-body math for ego and object motion.

All quantities are float64. ``SE3Transform`` is an immutable value type that
maps points from a source frame into a target frame, ``p_b = R @ p_a + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9
DEGENERATE_NORM = 1e-9


class DegenerateRotationInput(ValueError):
    """Raised when a 6D rotation cannot be orthonormalized."""


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_of(rotation: np.ndarray) -> float:
    """Heading of the x-axis after rotation, projected onto the ground plane."""
    return float(np.arctan2(rotation[1, 0], rotation[0, 0]))


def wrap_angle(angle):
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


@dataclass(frozen=True)
class SE3Transform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise ValueError("SE3Transform entries must be finite")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHO_TOL * 10 or abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL * 10:
            raise ValueError("rotation must be orthonormal with det +1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "SE3Transform":
        return cls()

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "SE3Transform":
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:3, :3], mat[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "SE3Transform":
        return cls(rot_z(yaw), np.asarray(translation, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def inverse(self) -> "SE3Transform":
        rt = self.rotation.T
        return SE3Transform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a point (3,) or a stack of points (n, 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def apply_vector(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def __matmul__(self, other: "SE3Transform") -> "SE3Transform":
        return compose(self, other)

    @property
    def yaw(self) -> float:
        return yaw_of(self.rotation)


def compose(a: SE3Transform, b: SE3Transform) -> SE3Transform:
    """Return ``a . b``: apply ``b`` first, then ``a``."""
    return SE3Transform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


@dataclass(frozen=True)
class ObjectDynamics:
    """Ground-plane velocity plus an optional heading change.

    ``turn_rate`` is the heading change accumulated over one propagation
    interval ``dt`` (radians per interval, not per second).
    """

    velocity: tuple = (0.0, 0.0)
    turn_rate: float = 0.0
    dt: float = 0.5

    def __post_init__(self):
        vel = tuple(float(v) for v in np.asarray(self.velocity, dtype=np.float64).reshape(2))
        object.__setattr__(self, "velocity", vel)
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not np.isfinite(self.turn_rate) or not all(np.isfinite(vel)):
            raise ValueError("dynamics must be finite")


def object_motion_transform(d: ObjectDynamics) -> SE3Transform:
    vx, vy = d.velocity
    return SE3Transform(rot_z(d.turn_rate), np.array([vx * d.dt, vy * d.dt, 0.0]))


def update_reference(r: np.ndarray, t_obj: SE3Transform, t_ego: SE3Transform) -> np.ndarray:
    """Move a reference point by object motion, then into the next ego frame.

    Accepts a single point (3,) or a stack (n, 3).
    """
    return t_ego.apply(t_obj.apply(r))


@dataclass(frozen=True)
class Rot6D:
    a1: np.ndarray
    a2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a1", np.array(self.a1, dtype=np.float64).reshape(3))
        object.__setattr__(self, "a2", np.array(self.a2, dtype=np.float64).reshape(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.a1, self.a2])


def to_rot6d(r) -> Rot6D:
    rot = r.rotation if isinstance(r, SE3Transform) else np.asarray(r, dtype=np.float64)
    return Rot6D(rot[:, 0].copy(), rot[:, 1].copy())


def from_rot6d(r6: Rot6D) -> np.ndarray:
    """Gram-Schmidt the two columns and complete the frame with a cross product."""
    a1, a2 = r6.a1, r6.a2
    n1 = np.linalg.norm(a1)
    if n1 < DEGENERATE_NORM or np.linalg.norm(a2) < DEGENERATE_NORM:
        raise DegenerateRotationInput("6D rotation columns must be nonzero")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 < DEGENERATE_NORM:
        raise DegenerateRotationInput("6D rotation columns are parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def pose_features(t: SE3Transform, trans_scale: float = 10.0) -> np.ndarray:
    """9-vector fed to the latent hyper-network: 6D rotation then scaled translation."""
    return np.concatenate([to_rot6d(t).as_vector(), t.translation / trans_scale])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation from a uniformly random axis and angle (Rodrigues)."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-np.pi, np.pi)
    k = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def random_transform(rng: np.random.Generator, scale: float = 5.0) -> SE3Transform:
    return SE3Transform(random_rotation(rng), rng.normal(scale=scale, size=3))
