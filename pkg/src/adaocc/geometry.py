"""Poses, oriented boxes, grid specs and the coordinate helpers shared by
every other module.

Quaternions are stored as ``(qx, qy, qz, qw)`` (scalar last) and act as
active rotations. Box sizes ``(h, w, d)`` map to the object-frame x, y and z
axes respectively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Pose",
    "OrientedBox3",
    "GridSpec",
    "SceneBounds",
    "quat_normalize",
    "quat_multiply",
    "quat_conjugate",
    "quat_to_matrix",
    "quat_from_yaw",
    "quat_yaw",
    "transform_point",
    "inverse_transform_point",
    "box_sampling_grid",
    "world_to_grid",
    "point_in_box",
    "box_corners",
    "FULL_RANGE",
    "CLOSE_RANGE",
]

_QUAT_TOL = 1e-12


def _vec3(v, name="vector"):
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < _QUAT_TOL:
        raise ValueError("quaternion has zero or non-finite norm")
    if abs(n - 1.0) <= 4 * np.finfo(float).eps:
        # already unit up to rounding; dividing again would drift the last bits
        return q.copy()
    return q / n


def quat_multiply(a, b):
    """Hamilton product ``a * b`` for scalar-last quaternions."""
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_conjugate(q):
    return np.array([-q[0], -q[1], -q[2], q[3]], dtype=np.float64)


def quat_to_matrix(q):
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_yaw(yaw):
    half = 0.5 * float(yaw)
    return np.array([0.0, 0.0, np.sin(half), np.cos(half)])


def quat_yaw(q):
    """Heading angle of the rotated x axis projected on the xy plane."""
    r = quat_to_matrix(q)
    return float(np.arctan2(r[1, 0], r[0, 0]))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``p -> R(q) p + t``."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))

    def __post_init__(self):
        t = _vec3(self.translation, "translation")
        q = quat_normalize(self.rotation)
        t.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_yaw(cls, translation, yaw):
        return cls(translation, quat_from_yaw(yaw))

    @property
    def matrix(self):
        return quat_to_matrix(self.rotation)

    def inverse(self):
        q_inv = quat_conjugate(self.rotation)
        t_inv = -quat_to_matrix(q_inv) @ self.translation
        return Pose(t_inv, q_inv)

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.matrix @ other.translation + self.translation
        return Pose(t, q)

    def __matmul__(self, other):
        return self.compose(other)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.translation, other.translation)
            and np.array_equal(self.rotation, other.rotation)
        )

    __hash__ = None


def transform_point(pose: Pose, p):
    """Apply ``pose`` to a point ``(3,)`` or a batch of points ``(N, 3)``."""
    p = np.asarray(p, dtype=np.float64)
    return p @ pose.matrix.T + pose.translation


def inverse_transform_point(pose: Pose, p):
    p = np.asarray(p, dtype=np.float64)
    return (p - pose.translation) @ pose.matrix


@dataclass(frozen=True, eq=False)
class OrientedBox3:
    pose: Pose
    size: np.ndarray
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        size = _vec3(self.size, "size")
        if np.any(size <= 0):
            raise ValueError(f"box size must be strictly positive, got {size}")
        score = float(self.score)
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {score}")
        size.flags.writeable = False
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", score)

    @property
    def center(self):
        return self.pose.translation

    @property
    def volume(self):
        return float(np.prod(self.size))

    @property
    def yaw(self):
        return quat_yaw(self.pose.rotation)

    def replace(self, **changes) -> "OrientedBox3":
        kw = dict(pose=self.pose, size=self.size, class_id=self.class_id, score=self.score)
        kw.update(changes)
        return OrientedBox3(**kw)

    def to_params(self):
        """Regression vector ``(x, y, z, qx, qy, qz, qw, h, w, d)``."""
        return np.concatenate([self.pose.translation, self.pose.rotation, self.size])

    def to_dict(self):
        return {
            "class_id": self.class_id,
            "score": self.score,
            "translation": [float(v) for v in self.pose.translation],
            "rotation": [float(v) for v in self.pose.rotation],
            "size": [float(v) for v in self.size],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            pose=Pose(d["translation"], d["rotation"]),
            size=d["size"],
            class_id=d.get("class_id", 0),
            score=d.get("score", 1.0),
        )

    def __eq__(self, other):
        if not isinstance(other, OrientedBox3):
            return NotImplemented
        return (
            self.pose == other.pose
            and np.array_equal(self.size, other.size)
            and self.class_id == other.class_id
            and self.score == other.score
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Axis-aligned lattice: ``dims`` cells of edge ``voxel_size`` from ``origin``."""

    origin: np.ndarray
    voxel_size: float
    dims: tuple

    def __post_init__(self):
        origin = _vec3(self.origin, "origin")
        vs = float(self.voxel_size)
        if not (np.isfinite(vs) and vs > 0):
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        if not np.all(np.isfinite(origin + np.array(dims) * vs)):
            raise ValueError("grid extent is not finite")
        origin.flags.writeable = False
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def from_bounds(cls, bounds: "SceneBounds", voxel_size: float) -> "GridSpec":
        """Lattice anchored at ``bounds.min`` covering ``bounds`` (rounded up)."""
        ext = (bounds.max - bounds.min) / voxel_size
        dims = tuple(int(np.ceil(e - 1e-9)) for e in ext)
        return cls(bounds.min, voxel_size, dims)

    @property
    def n_cells(self):
        return int(np.prod(self.dims))

    @property
    def extent_max(self):
        return self.origin + np.asarray(self.dims) * self.voxel_size

    @property
    def bounds(self) -> "SceneBounds":
        return SceneBounds(self.origin, self.extent_max)

    def cell_centers(self):
        """Centers of every cell, shape ``(nx, ny, nz, 3)`` indexed ``[i, j, k]``."""
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def same_as(self, other: "GridSpec", tol=1e-9) -> bool:
        return (
            self.dims == other.dims
            and abs(self.voxel_size - other.voxel_size) <= tol
            and bool(np.all(np.abs(self.origin - other.origin) <= tol))
        )

    def to_dict(self):
        return {
            "origin": [float(v) for v in self.origin],
            "voxel_size": self.voxel_size,
            "dims": list(self.dims),
        }

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.voxel_size == other.voxel_size
            and np.array_equal(self.origin, other.origin)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SceneBounds:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = _vec3(self.min, "min")
        hi = _vec3(self.max, "max")
        if np.any(lo >= hi):
            raise ValueError(f"bounds min must be < max component-wise, got {lo} / {hi}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def contains(self, p):
        p = np.asarray(p, dtype=np.float64)
        return np.all((p >= self.min) & (p <= self.max), axis=-1)

    def intersect(self, other: "SceneBounds") -> "SceneBounds":
        return SceneBounds(np.maximum(self.min, other.min), np.minimum(self.max, other.max))

    def to_dict(self):
        return {"min": [float(v) for v in self.min], "max": [float(v) for v in self.max]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["min"], d["max"])

    def __eq__(self, other):
        if not isinstance(other, SceneBounds):
            return NotImplemented
        return bool(np.array_equal(self.min, other.min) and np.array_equal(self.max, other.max))

    __hash__ = None


FULL_RANGE = SceneBounds([-50.0, -50.0, -5.0], [50.0, 50.0, 3.0])
CLOSE_RANGE = SceneBounds([-12.8, -12.8, -5.0], [12.8, 12.8, 3.0])


def _lattice_1d(half, n):
    if n == 1:
        return np.zeros(1)
    return np.linspace(-half, half, n)


def box_local_lattice(size, n_per_axis: int):
    """Regular ``n^3`` lattice over ``[-size/2, size/2]`` in the box frame.

    Ordered x-fastest so that index ``(k * n + j) * n + i`` maps to lattice
    coordinate ``(i, j, k)``.
    """
    n = int(n_per_axis)
    if n < 1:
        raise ValueError("n_per_axis must be >= 1")
    size = np.asarray(size, dtype=np.float64)
    xs, ys, zs = (_lattice_1d(size[a] / 2.0, n) for a in range(3))
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


def box_sampling_grid(box: OrientedBox3, n_per_axis: int = 5):
    """Ego-frame sample points of a regular lattice spanning ``box``.

    Returns an ``(n**3, 3)`` array. Endpoints are included for ``n >= 2``;
    ``n == 1`` yields the box center.
    """
    local = box_local_lattice(box.size, n_per_axis)
    return transform_point(box.pose, local)


def box_corners(box: OrientedBox3):
    return box_sampling_grid(box, 2)


def world_to_grid(spec: GridSpec, p):
    """Continuous cell index ``(p - origin) / voxel_size``; no clamping."""
    p = np.asarray(p, dtype=np.float64)
    return (p - spec.origin) / spec.voxel_size


def point_in_box(box: OrientedBox3, p, tol: float = 1e-9):
    """Closed-interval containment test; vectorised over leading axes.

    ``tol`` (meters) absorbs round-off from the inverse rotation so that
    points generated on a face still test as inside.
    """
    local = inverse_transform_point(box.pose, p)
    return np.all(np.abs(local) <= box.size / 2.0 + tol, axis=-1)
