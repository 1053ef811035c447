"""Dense feature volumes, continuous sampling, and box-aligned pooling of
object feature vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .geometry import GridSpec, OrientedBox3, box_sampling_grid, world_to_grid

__all__ = [
    "FeatureVolume",
    "interpolate",
    "interpolate_many",
    "inside_hull",
    "sample_object_feature",
    "BoxFeaturePooler",
    "POOLING_MODES",
    "INTERP_MODES",
]

POOLING_MODES = ("max", "avg", "global_max", "global_mean")
INTERP_MODES = ("tricubic", "trilinear")

_HULL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    """Feature vectors sampled at voxel centers, ``data[i, j, k, c]``.

    A bird's-eye-view plane is the ``nz == 1`` case.
    """

    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        nx, ny, nz = self.spec.dims
        if data.ndim != 4 or data.shape[:3] != (nx, ny, nz) or data.shape[3] < 1:
            raise ValueError(f"data shape {data.shape} does not match dims {self.spec.dims} x C")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature values must be finite")
        data = np.array(data, copy=True)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def channels(self):
        return self.data.shape[3]

    def __eq__(self, other):
        if not isinstance(other, FeatureVolume):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.data, other.data)

    __hash__ = None


def _node_coords(spec: GridSpec, points):
    """Continuous index relative to the voxel-center lattice."""
    return world_to_grid(spec, points) - 0.5


def inside_hull(spec: GridSpec, points, tol=_HULL_TOL):
    """Whether points lie inside the hull of the sample nodes.

    Axes with a single node (e.g. a BEV plane) accept the whole cell slab.
    """
    u = _node_coords(spec, np.atleast_2d(points))
    dims = np.asarray(spec.dims)
    lo = np.where(dims == 1, -0.5, 0.0) - tol
    hi = np.where(dims == 1, 0.5, dims - 1.0) + tol
    return np.all((u >= lo) & (u <= hi), axis=1)


def _linear_weights(u, n):
    """Two (index, weight) pairs per point along one axis."""
    if n == 1:
        z = np.zeros(u.shape, dtype=np.int64)
        return [z, z], [np.ones_like(u), np.zeros_like(u)]
    i0 = np.clip(np.floor(u), 0, n - 2).astype(np.int64)
    t = u - i0
    return [i0, i0 + 1], [1.0 - t, t]


def _cubic_weights(u, n):
    """Four Catmull-Rom (index, weight) pairs per point along one axis.

    Ghost nodes beyond the ends are the linear extrapolation of the two
    nearest nodes, folded back into in-range weights.
    """
    if n == 1:
        z = np.zeros(u.shape, dtype=np.int64)
        zero = np.zeros_like(u)
        return [z, z, z, z], [zero, np.ones_like(u), zero, zero]
    i0 = np.clip(np.floor(u), 0, n - 2).astype(np.int64)
    t = u - i0
    t2, t3 = t * t, t * t * t
    wm = 0.5 * (-t3 + 2.0 * t2 - t)
    w0 = 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0)
    w1 = 0.5 * (-3.0 * t3 + 4.0 * t2 + t)
    w2 = 0.5 * (t3 - t2)
    idx = [i0 - 1, i0, i0 + 1, i0 + 2]
    w = [wm, w0, w1, w2]
    # f[-1] = 2 f[0] - f[1]
    low = i0 == 0
    w0 = np.where(low, w0 + 2.0 * wm, w0)
    w1 = np.where(low, w1 - wm, w1)
    wm = np.where(low, 0.0, wm)
    # f[n] = 2 f[n-1] - f[n-2]
    high = i0 == n - 2
    w1 = np.where(high, w1 + 2.0 * w2, w1)
    w0 = np.where(high, w0 - w2, w0)
    w2 = np.where(high, 0.0, w2)
    idx = [np.clip(i, 0, n - 1) for i in idx]
    return idx, [wm, w0, w1, w2]


def interpolate_many(F: FeatureVolume, points, mode: str = "tricubic"):
    """Interpolate ``F`` at ``(N, 3)`` world points, returning ``(N, C)``.

    Queries inside the grid extent but outside the node hull are clamped to
    the hull; queries beyond the extent raise ``ValueError``.
    """
    if mode not in INTERP_MODES:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    spec = F.spec
    g = world_to_grid(spec, pts)
    dims = np.asarray(spec.dims)
    beyond = np.any((g < -_HULL_TOL) | (g > dims + _HULL_TOL), axis=1)
    if np.any(beyond):
        raise ValueError("query point lies beyond the feature volume extent")
    u = np.clip(g - 0.5, 0.0, np.maximum(dims - 1.0, 0.0))
    weights = _cubic_weights if mode == "tricubic" else _linear_weights
    ix, wx = weights(u[:, 0], spec.dims[0])
    iy, wy = weights(u[:, 1], spec.dims[1])
    iz, wz = weights(u[:, 2], spec.dims[2])
    out = np.zeros((pts.shape[0], F.channels))
    data = F.data
    for a in range(len(ix)):
        for b in range(len(iy)):
            wab = wx[a] * wy[b]
            for c in range(len(iz)):
                w = wab * wz[c]
                out += w[:, None] * data[ix[a], iy[b], iz[c]]
    return out


def interpolate(F: FeatureVolume, p, mode: str = "tricubic"):
    """Feature vector at a single world point."""
    return interpolate_many(F, np.asarray(p, dtype=np.float64).reshape(1, 3), mode)[0]


def pool_features(samples, pooling: str = "max"):
    """Reduce ``(N, C)`` sampled features to one ``(C,)`` vector."""
    if pooling not in POOLING_MODES:
        raise ValueError(f"unknown pooling mode {pooling!r}")
    samples = np.asarray(samples, dtype=np.float64)
    C = samples.shape[1]
    if pooling == "max":
        return samples.max(axis=0)
    if pooling == "avg":
        return samples.mean(axis=0)
    if pooling == "global_max":
        return np.full(C, samples.max())
    return np.full(C, samples.mean())


def sample_object_feature(
    F: FeatureVolume,
    box: OrientedBox3,
    n_per_axis: int = 5,
    pooling: str = "max",
    mode: str = "tricubic",
):
    """Object feature vector pooled over a regular lattice inside ``box``.

    Lattice points outside the node hull are excluded from the pool.
    """
    lattice = box_sampling_grid(box, n_per_axis)
    keep = inside_hull(F.spec, lattice)
    if not np.any(keep):
        raise ValueError("box outside feature volume")
    samples = interpolate_many(F, lattice[keep], mode)
    return pool_features(samples, pooling)


class BoxFeaturePooler(TransformerMixin, BaseEstimator):
    """Turn ``(FeatureVolume, OrientedBox3)`` pairs into object feature rows.

    Stateless; ``fit`` only validates parameters so the pooler can sit in a
    pipeline ahead of a :class:`~adaocc.folding.FoldingDecoder`.
    """

    def __init__(self, n_per_axis=5, pooling="max", mode="tricubic"):
        self.n_per_axis = n_per_axis
        self.pooling = pooling
        self.mode = mode

    def fit(self, X=None, y=None):
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")
        if self.mode not in INTERP_MODES:
            raise ValueError(f"mode must be one of {INTERP_MODES}")
        if int(self.n_per_axis) < 1:
            raise ValueError("n_per_axis must be >= 1")
        return self

    def transform(self, X):
        self.fit()
        rows = [
            sample_object_feature(F, box, self.n_per_axis, self.pooling, self.mode) for F, box in X
        ]
        return np.asarray(rows)

    def __sklearn_is_fitted__(self):
        return True
