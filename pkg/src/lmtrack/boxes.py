from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angle

# order of the 9-vector box layout
BOX_FIELDS = ("x", "y", "z", "w", "l", "h", "theta", "vx", "vy")


@dataclass(frozen=True)
class BoundingBox3D:
    center: np.ndarray
    size: np.ndarray
    heading: float
    velocity: np.ndarray
    score: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        center = np.array(self.center, dtype=np.float64).reshape(3)
        size = np.array(self.size, dtype=np.float64).reshape(3)
        velocity = np.array(self.velocity, dtype=np.float64).reshape(2)
        if np.any(size <= 0):
            raise ValueError(f"box sizes must be positive, got {size}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "velocity", velocity)
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "class_id", int(self.class_id))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.center, self.size, [self.heading], self.velocity])

    @classmethod
    def from_vector(cls, vec, score: float = 1.0, class_id: int = 0) -> "BoundingBox3D":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[0:3], vec[3:6], float(vec[6]), vec[7:9], score, class_id)
