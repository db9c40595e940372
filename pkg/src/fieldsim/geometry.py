"""Rigid transforms, rays, axis-aligned boxes, and rotation parameterizations.

Everything here is plain numpy on small arrays; these are value types used
by every other module. Directions are always stored as unit 3-vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-9


@dataclass
class Pose:
    """Rigid transform mapping object coordinates to world coordinates.

    ``rotation`` must be orthonormal with determinant +1; ``translation``
    is in meters.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def validate(self) -> "Pose":
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err >= _ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.3e})")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation has negative determinant")
        return self

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self * other)(x) = self(other(x))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform points (3,) or (N, 3) from object to world frame."""
        p = np.asarray(p, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_dir(self, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d, dtype=np.float64)
        return d @ self.rotation.T

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return Pose(m[:3, :3], m[:3, 3])


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit norm

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)

    def validate(self) -> "Ray":
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) >= 1e-9:
            raise ValueError(f"ray direction not unit norm (|d| = {n})")
        return self

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64).reshape(3)
        self.max = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(self.min > self.max):
            raise ValueError("Aabb min must be <= max componentwise")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def extents(self) -> np.ndarray:
        return self.max - self.min

    def contains(self, p: np.ndarray) -> np.ndarray:
        """Inclusive containment test for points (3,) or (N, 3)."""
        p = np.asarray(p)
        return np.logical_and(p >= self.min, p <= self.max).all(axis=-1)

    def inflate(self, factor: float) -> "Aabb":
        c, h = self.center, 0.5 * self.extents * factor
        return Aabb(c - h, c + h)


@dataclass
class Rotation6D:
    """Two unnormalized 3-vectors; Gram-Schmidt yields the rotation."""

    a1: np.ndarray
    a2: np.ndarray

    def __post_init__(self):
        self.a1 = np.asarray(self.a1, dtype=np.float64).reshape(3)
        self.a2 = np.asarray(self.a2, dtype=np.float64).reshape(3)

    @staticmethod
    def identity() -> "Rotation6D":
        return Rotation6D(np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))


def rot6d_to_matrix(r: Rotation6D) -> np.ndarray:
    """Gram-Schmidt the two vectors into an orthonormal right-handed basis.

    Columns of the result are (b1, b2, b1 x b2). Raises on zero or
    parallel inputs, where the construction is degenerate.
    """
    n1 = np.linalg.norm(r.a1)
    if n1 < 1e-12:
        raise ValueError("rot6d: first vector is zero")
    b1 = r.a1 / n1
    a2p = r.a2 - (r.a2 @ b1) * b1
    n2 = np.linalg.norm(a2p)
    if n2 < 1e-12:
        raise ValueError("rot6d: vectors are parallel or second vector is zero")
    b2 = a2p / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def ray_aabb_intersect(ray: Ray, box: Aabb):
    """Parametric intersection interval of a ray with a box.

    Returns ``(t_near, t_far)`` clamped to t >= 0, or ``None`` when the ray
    misses the box or the box lies entirely behind the origin.
    """
    t0, t1 = -np.inf, np.inf
    for k in range(3):
        o, d = ray.origin[k], ray.direction[k]
        if d == 0.0:
            if o < box.min[k] or o > box.max[k]:
                return None
            continue
        inv = 1.0 / d
        a = (box.min[k] - o) * inv
        b = (box.max[k] - o) * inv
        if a > b:
            a, b = b, a
        t0 = max(t0, a)
        t1 = min(t1, b)
    if t1 < t0 or t1 < 0.0:
        return None
    return max(t0, 0.0), t1


def ray_aabb_intersect_batch(origins: np.ndarray, dirs: np.ndarray, box: Aabb):
    """Vectorized slab test for N rays against one box.

    Returns ``(t_near, t_far, hit)`` arrays; entries of misses are undefined.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        a = (box.min - origins) * inv
        b = (box.max - origins) * inv
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    # zero direction components: inside slab -> (-inf, inf), outside -> miss
    zero = dirs == 0.0
    inside = (origins >= box.min) & (origins <= box.max)
    lo = np.where(zero, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(zero, np.where(inside, np.inf, -np.inf), hi)
    t0 = lo.max(axis=-1)
    t1 = hi.min(axis=-1)
    hit = (t1 >= t0) & (t1 >= 0.0)
    return np.maximum(t0, 0.0), t1, hit


def world_to_object(p: np.ndarray, pose: Pose) -> np.ndarray:
    """Map world points into the frame of ``pose``: R^T (p - t)."""
    p = np.asarray(p, dtype=np.float64)
    return (p - pose.translation) @ pose.rotation


def object_to_world(p: np.ndarray, pose: Pose) -> np.ndarray:
    return pose.apply(p)
