"""Quaternion/pose algebra and the pose-error metrics.

Conventions used everywhere in this package:
  - quaternions are stored in (w, x, y, z) order,
  - q and -q encode the same rotation (double cover),
  - translations are in meters,
  - the average-model-distance (ADD) here is the squared-distance form
    with the 1/(2n) factor; the classic mean point distance is exposed
    separately as ``add_classic`` for auxiliary reporting only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

QUAT_NORM_FLOOR = 1e-8
QUAT_NORM_TOL = 1e-3


def normalize_quat(q: np.ndarray) -> np.ndarray:
    """Normalize a 4-vector quaternion, flooring the norm at 1e-8."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise InvalidArgumentError(f"quaternion must be a 4-vector, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise InvalidArgumentError("quaternion has non-finite components")
    norm = float(np.linalg.norm(q))
    return q / max(norm, QUAT_NORM_FLOOR)


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion in (w, x, y, z) order."""

    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def normalized(self) -> "Quaternion":
        q = normalize_quat(self.as_array())
        return Quaternion(*q)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.w, -self.x, -self.y, -self.z)

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_array(q: np.ndarray) -> "Quaternion":
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (4,):
            raise InvalidArgumentError(f"quaternion must be a 4-vector, got shape {q.shape}")
        return Quaternion(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    @staticmethod
    def from_axis_angle(axis: np.ndarray, angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n < 1e-12:
            return Quaternion.identity()
        axis = axis / n
        half = 0.5 * angle
        s = np.sin(half)
        return Quaternion(float(np.cos(half)), *(s * axis))

    def multiply(self, other: "Quaternion") -> "Quaternion":
        """Hamilton product self ⊗ other."""
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )


@dataclass(frozen=True)
class Pose:
    """Rigid transform: translation (meters) + unit quaternion."""

    translation: np.ndarray
    orientation: Quaternion

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (3,):
            raise InvalidArgumentError(f"translation must be a 3-vector, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise InvalidArgumentError("translation has non-finite components")
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), Quaternion.identity())

    def as_vector(self) -> np.ndarray:
        """7-vector (tx, ty, tz, qw, qx, qy, qz)."""
        return np.concatenate([self.translation, self.orientation.as_array()])

    @staticmethod
    def from_vector(v: np.ndarray, normalize: bool = True) -> "Pose":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (7,):
            raise InvalidArgumentError(f"pose vector must have 7 entries, got shape {v.shape}")
        q = normalize_quat(v[3:]) if normalize else v[3:]
        return Pose(v[:3].copy(), Quaternion.from_array(q))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (n, 3) points by this pose."""
        R = quat_to_rotation(self.orientation)
        return points @ R.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first, then ``self``."""
        R = quat_to_rotation(self.orientation)
        return Pose(
            R @ other.translation + self.translation,
            self.orientation.multiply(other.orientation),
        )

    def inverse(self) -> "Pose":
        R = quat_to_rotation(self.orientation)
        q_inv = self.orientation.conjugate()
        return Pose(-(R.T @ self.translation), q_inv)


@dataclass(frozen=True)
class ModelPointCloud:
    """Object model as points in the object frame; n is the Eq-style divisor."""

    object_id: str
    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidArgumentError(f"points must be (n, 3), got shape {pts.shape}")
        if pts.shape[0] < 4:
            raise InvalidArgumentError(f"model needs at least 4 points, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("model points have non-finite values")
        object.__setattr__(self, "points", pts)

    @property
    def num_points(self) -> int:
        return int(self.points.shape[0])


def quat_to_rotation(q: Quaternion | np.ndarray) -> np.ndarray:
    """Rotation matrix from a quaternion; invariant to the sign of q.

    Uses the norm-scaled formula, so mildly denormalized inputs still map
    to a proper rotation.
    """
    if isinstance(q, Quaternion):
        arr = q.as_array()
    else:
        arr = np.asarray(q, dtype=np.float64)
        if arr.shape != (4,):
            raise InvalidArgumentError(f"quaternion must be a 4-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("quaternion has non-finite components")
    n2 = float(arr @ arr)
    if n2 < QUAT_NORM_FLOOR:
        raise InvalidArgumentError("quaternion norm too small to define a rotation")
    w, x, y, z = arr / np.sqrt(n2)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def add_distance(est: Pose, gt: Pose, model: ModelPointCloud) -> float:
    """Average model distance: (1/2n) Σ ||(R̂x + t̂) − (Rx + t)||², in m²."""
    if not isinstance(model, ModelPointCloud):
        model = ModelPointCloud("anonymous", np.asarray(model))
    a = est.apply(model.points)
    b = gt.apply(model.points)
    d = a - b
    return float(np.sum(d * d) / (2.0 * model.num_points))


def add_classic(est: Pose, gt: Pose, model: ModelPointCloud) -> float:
    """Auxiliary metric: classic mean point distance (meters, unsquared)."""
    if not isinstance(model, ModelPointCloud):
        model = ModelPointCloud("anonymous", np.asarray(model))
    a = est.apply(model.points)
    b = gt.apply(model.points)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def _check_unit(q: Quaternion, name: str) -> np.ndarray:
    arr = q.as_array()
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} has non-finite components")
    norm = float(np.linalg.norm(arr))
    if abs(norm - 1.0) > QUAT_NORM_TOL:
        raise InvalidArgumentError(f"{name} is not normalized (norm={norm:.6f})")
    return arr / norm


def angular_error(q_est: Quaternion, q_gt: Quaternion) -> float:
    """θ = arccos(2⟨q̂, q⟩² − 1), in [0, π]; sign-invariant in both inputs."""
    a = _check_unit(q_est, "q_est")
    b = _check_unit(q_gt, "q_gt")
    inner = float(a @ b)
    arg = 2.0 * inner * inner - 1.0
    return float(np.arccos(np.clip(arg, -1.0, 1.0)))


def positional_error(est: Pose, gt: Pose) -> float:
    """Euclidean distance between the two translations, in meters."""
    return float(np.linalg.norm(est.translation - gt.translation))


def random_quaternion(rng: np.random.Generator) -> Quaternion:
    """Uniformly distributed unit quaternion."""
    q = rng.normal(size=4)
    return Quaternion(*normalize_quat(q))


def random_pose(rng: np.random.Generator, translation_scale: float = 1.0) -> Pose:
    return Pose(rng.normal(scale=translation_scale, size=3), random_quaternion(rng))
