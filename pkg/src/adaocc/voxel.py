"""Semantic voxel grids, voxelization, resolution changes, cropping and the
coarse-map / object-cloud fusion that builds the adaptive map."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import GridSpec, OrientedBox3, SceneBounds, world_to_grid

__all__ = [
    "PointCloud",
    "SemanticVoxelGrid",
    "AdaptiveMap",
    "MemoryStats",
    "voxelize_points",
    "grid_to_centers",
    "resample",
    "resample_factor",
    "crop",
    "fuse",
    "memory_stats",
    "HIGH_RES_LIMIT",
]

#: voxel sizes at or below this are "high resolution"
HIGH_RES_LIMIT = 0.2

_SNAP = 1e-9


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    class_id: Optional[int] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts = np.ascontiguousarray(pts)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.class_id is not None:
            object.__setattr__(self, "class_id", int(self.class_id))

    def __len__(self):
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.class_id == other.class_id and np.array_equal(self.points, other.points)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SemanticVoxelGrid:
    """Dense label volume indexed ``labels[i, j, k]`` (0 = free)."""

    spec: GridSpec
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        C = int(self.class_count)
        if C < 1 or C > 255:
            raise ValueError(f"class_count must be in [1, 255], got {C}")
        if labels.shape != self.spec.dims:
            if labels.size == self.spec.n_cells and labels.ndim == 1:
                labels = labels.reshape(self.spec.dims, order="F")
            else:
                raise ValueError(f"labels shape {labels.shape} does not match dims {self.spec.dims}")
        if labels.size and (labels.min() < 0 or labels.max() > C):
            raise ValueError(f"labels must lie in [0, {C}]")
        labels = np.array(labels, dtype=np.uint8, copy=True)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_count", C)

    @classmethod
    def empty(cls, spec: GridSpec, class_count: int):
        return cls(spec, np.zeros(spec.dims, dtype=np.uint8), class_count)

    @property
    def occupied(self):
        return self.labels > 0

    @property
    def occupied_count(self):
        return int(np.count_nonzero(self.labels))

    def flat_labels(self):
        """Labels in x-fastest order, index ``(k * ny + j) * nx + i``."""
        return self.labels.ravel(order="F")

    def __eq__(self, other):
        if not isinstance(other, SemanticVoxelGrid):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.class_count == other.class_count
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


@dataclass(frozen=True)
class AdaptiveMap:
    """Coarse semantic grid plus per-object high-resolution point clouds."""

    coarse: SemanticVoxelGrid
    objects: Sequence = field(default_factory=tuple)
    boxes: Sequence = field(default_factory=tuple)

    def __post_init__(self):
        if self.coarse.spec.voxel_size <= HIGH_RES_LIMIT + _SNAP:
            raise ValueError(
                f"coarse grid must be coarser than {HIGH_RES_LIMIT} m, got {self.coarse.spec.voxel_size}"
            )
        objs = tuple(self.objects)
        for o in objs:
            if len(o) == 0:
                raise ValueError("object clouds must be non-empty")
            if o.class_id is None:
                raise ValueError("object clouds must carry a class_id")
        boxes = tuple(self.boxes)
        if boxes and len(boxes) != len(objs):
            raise ValueError("boxes must be empty or match objects one-to-one")
        object.__setattr__(self, "objects", objs)
        object.__setattr__(self, "boxes", boxes)


def _cell_indices(spec: GridSpec, points):
    idx = np.floor(world_to_grid(spec, points)).astype(np.int64)
    valid = np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=1)
    return idx, valid


def voxelize_points(
    cloud: PointCloud,
    spec: GridSpec,
    label: Optional[int] = None,
    class_count: Optional[int] = None,
    return_dropped: bool = False,
):
    """Mark every cell containing at least one point with ``label``.

    Points outside ``[origin, extent)`` are dropped; with
    ``return_dropped=True`` the number of dropped points is returned as well.
    """
    if label is None:
        label = cloud.class_id
    if label is None:
        raise ValueError("no label given and cloud has no class_id")
    label = int(label)
    if class_count is None:
        class_count = max(label, 1)
    if not 1 <= label <= class_count:
        raise ValueError(f"label must be in [1, {class_count}], got {label}")
    labels = np.zeros(spec.dims, dtype=np.uint8)
    idx, valid = _cell_indices(spec, cloud.points)
    hit = idx[valid]
    labels[hit[:, 0], hit[:, 1], hit[:, 2]] = label
    grid = SemanticVoxelGrid(spec, labels, class_count)
    if return_dropped:
        return grid, int(np.count_nonzero(~valid))
    return grid


def grid_to_centers(grid: SemanticVoxelGrid, bounds: Optional[SceneBounds] = None):
    """Cell centers of all occupied cells.

    Returns ``(points, labels)`` with ``points`` of shape ``(M, 3)``.
    """
    ii, jj, kk = np.nonzero(grid.labels)
    idx = np.stack([ii, jj, kk], axis=1)
    pts = grid.spec.origin + (idx + 0.5) * grid.spec.voxel_size
    labels = grid.labels[ii, jj, kk]
    if bounds is not None:
        keep = bounds.contains(pts)
        pts, labels = pts[keep], labels[keep]
    return pts, labels.astype(np.int64)


def resample_factor(source: float, target: float):
    """Integer ratio between voxel sizes as ``(factor, upsample)``."""
    ratio = source / target
    if ratio >= 1.0:
        f, up = ratio, True
    else:
        f, up = 1.0 / ratio, False
    n = int(round(f))
    if n < 1 or abs(f - n) > 1e-6 * f:
        raise ValueError(f"voxel sizes {source} and {target} are not related by an integer factor")
    return n, up


def _downsample_labels(labels, f, class_count):
    nx, ny, nz = labels.shape
    pad = [(0, (-d) % f) for d in labels.shape]
    if any(p[1] for p in pad):
        labels = np.pad(labels, pad)
    mx, my, mz = (d // f for d in labels.shape)
    blocks = labels.reshape(mx, f, my, f, mz, f)
    best = np.zeros((mx, my, mz), dtype=np.int64)
    best_label = np.zeros((mx, my, mz), dtype=np.uint8)
    # ascending class ids with strict '>' keeps the smallest id on ties
    for c in range(1, class_count + 1):
        cnt = np.count_nonzero(blocks == c, axis=(1, 3, 5))
        better = cnt > best
        best[better] = cnt[better]
        best_label[better] = c
    return best_label


def resample(grid: SemanticVoxelGrid, target_voxel_size: float) -> SemanticVoxelGrid:
    """Change resolution by an integer factor.

    Upsampling replicates each label into ``f**3`` children. Downsampling
    takes the majority non-free child label (smallest class id on ties); a
    parent is free only if all its children are. Grids whose dims are not a
    multiple of the factor are padded with free cells.
    """
    f, up = resample_factor(grid.spec.voxel_size, target_voxel_size)
    if f == 1:
        return grid
    if up:
        labels = grid.labels
        for axis in range(3):
            labels = np.repeat(labels, f, axis=axis)
        dims = tuple(d * f for d in grid.spec.dims)
    else:
        labels = _downsample_labels(grid.labels, f, grid.class_count)
        dims = labels.shape
    spec = GridSpec(grid.spec.origin, float(target_voxel_size), dims)
    return SemanticVoxelGrid(spec, labels, grid.class_count)


def _snapped_index_range(spec: GridSpec, bounds: SceneBounds):
    lo = world_to_grid(spec, bounds.min)
    hi = world_to_grid(spec, bounds.max)
    lo = np.floor(lo + _SNAP).astype(np.int64)
    hi = np.ceil(hi - _SNAP).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(spec.dims))
    return lo, hi


def crop(grid: SemanticVoxelGrid, bounds: SceneBounds) -> SemanticVoxelGrid:
    """Sub-grid covering ``bounds`` snapped outward to the lattice."""
    lo, hi = _snapped_index_range(grid.spec, bounds)
    if np.any(hi <= lo):
        raise ValueError("crop bounds do not intersect the grid")
    labels = grid.labels[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    spec = GridSpec(grid.spec.origin + lo * grid.spec.voxel_size, grid.spec.voxel_size, tuple(hi - lo))
    return SemanticVoxelGrid(spec, labels, grid.class_count)


def fuse(coarse: SemanticVoxelGrid, objects: Sequence[PointCloud], target_spec) -> SemanticVoxelGrid:
    """Integrate object clouds onto an upsampled coarse map.

    ``target_spec`` is a :class:`GridSpec` or a voxel size. The coarse map is
    resampled to the target resolution, then each object (in list order)
    writes its label into the cells it occupies. Coarse content outside the
    object cells is kept.
    """
    target_size = target_spec.voxel_size if isinstance(target_spec, GridSpec) else float(target_spec)
    if target_size > coarse.spec.voxel_size * (1 + 1e-9):
        raise ValueError("fusion target must not be coarser than the coarse grid")
    base = resample(coarse, target_size)
    if isinstance(target_spec, GridSpec) and not base.spec.same_as(target_spec):
        raise ValueError("target grid is not the lattice obtained by resampling the coarse grid")
    labels = np.array(base.labels)
    spec = base.spec
    C = base.class_count
    for obj in objects:
        if obj.class_id is None or not 1 <= obj.class_id <= C:
            raise ValueError(f"object class_id must be in [1, {C}]")
        idx, valid = _cell_indices(spec, obj.points)
        hit = idx[valid]
        labels[hit[:, 0], hit[:, 1], hit[:, 2]] = obj.class_id
    return SemanticVoxelGrid(spec, labels, C)


@dataclass(frozen=True)
class MemoryStats:
    cell_count: int
    occupied_count: int
    point_count: int
    bytes_estimate: int

    def to_dict(self):
        return {
            "cell_count": self.cell_count,
            "occupied_count": self.occupied_count,
            "point_count": self.point_count,
            "bytes_estimate": self.bytes_estimate,
        }


BYTES_PER_CELL = 1
BYTES_PER_POINT = 12


def memory_stats(obj) -> MemoryStats:
    """Storage footprint of a grid, a bare grid spec, or an adaptive map."""
    if isinstance(obj, AdaptiveMap):
        grid = obj.coarse
        points = sum(len(o) for o in obj.objects)
    else:
        grid = obj
        points = 0
    if isinstance(grid, GridSpec):
        cells, occ = grid.n_cells, 0
    else:
        cells, occ = grid.spec.n_cells, grid.occupied_count
    return MemoryStats(
        cell_count=cells,
        occupied_count=occ,
        point_count=points,
        bytes_estimate=cells * BYTES_PER_CELL + points * BYTES_PER_POINT,
    )
