"""Synthetic driving scenes: object placement, analytic surfaces, ground
truth rasterization, a geometric feature encoder standing in for the image
backbone, and a noisy oracle detector."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .classes import CLASS_COUNT, GROUND, OBJECT_CLASS_IDS, OBJECT_CLASSES, WALL
from .features import FeatureVolume
from .geometry import (
    GridSpec,
    OrientedBox3,
    Pose,
    SceneBounds,
    box_corners,
    quat_from_yaw,
    quat_multiply,
    transform_point,
    world_to_grid,
)
from .voxel import PointCloud, SemanticVoxelGrid

__all__ = [
    "SHAPES",
    "SIZE_PRIORS",
    "CLASS_SHAPES",
    "SceneObject",
    "Wall",
    "SceneSpec",
    "SceneConfig",
    "VisibilityConfig",
    "DetectorNoise",
    "PlacementError",
    "gen_scene",
    "inside_solid",
    "sample_surface",
    "sample_background",
    "visible_points",
    "rasterize_gt",
    "encode_features",
    "descriptor_layout",
    "gt_object_clouds",
    "surface_object_clouds",
    "oracle_detect",
]

SHAPES = ("box_shell", "ellipsoid", "cylinder", "composite_car")

#: mean (h, w, d) in meters: length along x, width along y, height along z
SIZE_PRIORS = {
    "barrier": (2.0, 0.5, 1.0),
    "bicycle": (1.7, 0.6, 1.3),
    "bus": (11.0, 2.9, 3.5),
    "car": (4.6, 1.9, 1.7),
    "construction": (6.5, 2.8, 3.2),
    "motorcycle": (2.1, 0.8, 1.5),
    "pedestrian": (0.7, 0.7, 1.75),
    "traffic_cone": (0.45, 0.45, 1.0),
    "trailer": (10.0, 2.9, 3.8),
    "truck": (7.0, 2.6, 3.0),
}
SIZE_JITTER = 0.1

CLASS_SHAPES = {
    "barrier": "box_shell",
    "bicycle": "ellipsoid",
    "bus": "box_shell",
    "car": "composite_car",
    "construction": "box_shell",
    "motorcycle": "ellipsoid",
    "pedestrian": "cylinder",
    "traffic_cone": "cylinder",
    "trailer": "box_shell",
    "truck": "composite_car",
}

# composite_car parts in the normalized frame: (min corner, max corner)
_CAR_PARTS = (
    (np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 0.1])),
    (np.array([-0.6, -0.85, 0.1]), np.array([0.4, 0.85, 1.0])),
)

GROUND_Z = -1.8
PLACEMENT_ATTEMPTS = 1000


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    shape: str
    box: OrientedBox3

    def __post_init__(self):
        if self.class_id not in OBJECT_CLASS_IDS:
            raise ValueError(f"object class_id must be one of {OBJECT_CLASS_IDS}")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")

    def to_dict(self):
        return {"class_id": self.class_id, "shape": self.shape, "box": self.box.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["class_id"]), d["shape"], OrientedBox3.from_dict(d["box"]))


@dataclass(frozen=True)
class Wall:
    """Vertical planar segment from ``start`` to ``end`` (xy) rising from the ground."""

    start: tuple
    end: tuple
    height: float = 3.0
    class_id: int = WALL

    def to_dict(self):
        return {
            "start": [float(v) for v in self.start],
            "end": [float(v) for v in self.end],
            "height": float(self.height),
            "class_id": int(self.class_id),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["start"]), tuple(d["end"]), float(d["height"]), int(d["class_id"]))


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    bounds: SceneBounds
    objects: tuple = ()
    ground_z: float = GROUND_Z
    walls: tuple = ()

    def to_dict(self):
        return {
            "seed": int(self.seed),
            "bounds": self.bounds.to_dict(),
            "ground_z": float(self.ground_z),
            "objects": [o.to_dict() for o in self.objects],
            "walls": [w.to_dict() for w in self.walls],
        }

    def to_json(self) -> str:
        """Canonical JSON: sorted keys, shortest round-trip float repr."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        return cls(
            seed=int(d["seed"]),
            bounds=SceneBounds.from_dict(d["bounds"]),
            objects=tuple(SceneObject.from_dict(o) for o in d["objects"]),
            ground_z=float(d["ground_z"]),
            walls=tuple(Wall.from_dict(w) for w in d.get("walls", [])),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SceneConfig:
    bounds: SceneBounds = SceneBounds([-12.8, -12.8, -5.0], [12.8, 12.8, 3.0])
    n_objects: int = 10
    n_walls: int = 0
    ground_z: float = GROUND_Z
    #: keep this clear radius (m, xy) around the ego origin free of objects
    ego_clearance: float = 3.0
    #: extra xy gap (m) between object footprint circles
    min_gap: float = 0.5
    classes: tuple = OBJECT_CLASS_IDS


@dataclass(frozen=True)
class VisibilityConfig:
    ego_position: tuple = (0.0, 0.0, 0.0)
    mode: str = "front_facing"
    max_range: float = 1e9

    def __post_init__(self):
        if self.mode not in ("full", "front_facing"):
            raise ValueError(f"unknown visibility mode {self.mode!r}")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")


@dataclass(frozen=True)
class DetectorNoise:
    sigma_translation: float = 0.2
    sigma_yaw: float = 0.05
    sigma_size_rel: float = 0.05
    drop_prob: float = 0.1
    class_flip_prob: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_translation, self.sigma_yaw, self.sigma_size_rel) < 0:
            raise ValueError("noise scales must be non-negative")
        for p in (self.drop_prob, self.class_flip_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")

    def to_dict(self):
        return {
            "sigma_translation": self.sigma_translation,
            "sigma_yaw": self.sigma_yaw,
            "sigma_size_rel": self.sigma_size_rel,
            "drop_prob": self.drop_prob,
            "class_flip_prob": self.class_flip_prob,
            "seed": self.seed,
        }


def _rng(*keys):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


# --------------------------------------------------------------------------
# scene generation


def _footprint_radius(size):
    return 0.5 * float(np.hypot(size[0], size[1]))


def gen_scene(seed: int, config: SceneConfig = SceneConfig()) -> SceneSpec:
    """Place ``config.n_objects`` non-overlapping objects on the ground plane.

    Objects are rejected when their footprint circles (plus ``min_gap``)
    intersect, leave the bounds, or enter the ego clearance disc.
    """
    rng = _rng(seed, 0)
    b = config.bounds
    objects = []
    placed = []  # (center_xy, radius)
    for _ in range(config.n_objects):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            cid = int(rng.choice(config.classes))
            name = OBJECT_CLASSES[cid - 1]
            size = np.asarray(SIZE_PRIORS[name]) * (1.0 + SIZE_JITTER * rng.uniform(-1, 1, 3))
            yaw = float(rng.uniform(-np.pi, np.pi))
            radius = _footprint_radius(size)
            lo = b.min[:2] + radius
            hi = b.max[:2] - radius
            if np.any(lo >= hi):
                continue
            xy = rng.uniform(lo, hi)
            if np.hypot(*xy) < config.ego_clearance + radius:
                continue
            if any(np.hypot(*(xy - c)) < radius + r + config.min_gap for c, r in placed):
                continue
            z = config.ground_z + size[2] / 2.0
            if z + size[2] / 2.0 > b.max[2] or config.ground_z < b.min[2]:
                continue
            box = OrientedBox3(Pose.from_yaw([xy[0], xy[1], z], yaw), size, cid, 1.0)
            objects.append(SceneObject(cid, CLASS_SHAPES[name], box))
            placed.append((xy, radius))
            break
        else:
            raise PlacementError(
                f"could not place object {len(objects) + 1} after {PLACEMENT_ATTEMPTS} attempts"
            )
    walls = []
    for _ in range(config.n_walls):
        # walls run along the bounds' edges, pushed slightly inwards
        side = int(rng.integers(4))
        t0, t1 = sorted(rng.uniform(0.1, 0.9, 2))
        inset = 0.5
        x0, y0, x1, y1 = b.min[0] + inset, b.min[1] + inset, b.max[0] - inset, b.max[1] - inset
        if side == 0:
            s, e = (x0 + t0 * (x1 - x0), y0), (x0 + t1 * (x1 - x0), y0)
        elif side == 1:
            s, e = (x0 + t0 * (x1 - x0), y1), (x0 + t1 * (x1 - x0), y1)
        elif side == 2:
            s, e = (x0, y0 + t0 * (y1 - y0)), (x0, y0 + t1 * (y1 - y0))
        else:
            s, e = (x1, y0 + t0 * (y1 - y0)), (x1, y0 + t1 * (y1 - y0))
        walls.append(Wall(tuple(float(v) for v in s), tuple(float(v) for v in e), float(rng.uniform(1.5, 3.0))))
    return SceneSpec(int(seed), b, tuple(objects), float(config.ground_z), tuple(walls))


# --------------------------------------------------------------------------
# analytic shapes (normalized frame: box half-extents map to [-1, 1]^3)


def inside_solid(obj: SceneObject, points, tol=0.0):
    """Whether ego-frame ``points`` lie inside the object's solid primitive."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    u = (pts - obj.box.pose.translation) @ obj.box.pose.matrix / (obj.box.size / 2.0)
    return _inside_normalized(obj.shape, u, tol)


def _inside_normalized(shape, u, tol=0.0):
    one = 1.0 + tol
    if shape == "box_shell":
        return np.all(np.abs(u) <= one, axis=1)
    if shape == "ellipsoid":
        return np.sum(u * u, axis=1) <= one
    if shape == "cylinder":
        return (u[:, 0] ** 2 + u[:, 1] ** 2 <= one) & (np.abs(u[:, 2]) <= one)
    inside = np.zeros(len(u), dtype=bool)
    for lo, hi in _CAR_PARTS:
        inside |= np.all((u >= lo - tol) & (u <= hi + tol), axis=1)
    return inside


def _box_faces(lo, hi):
    """Six faces of an axis box as (axis, sign, value, lo, hi)."""
    faces = []
    for axis in range(3):
        faces.append((axis, -1.0, lo[axis], lo, hi))
        faces.append((axis, 1.0, hi[axis], lo, hi))
    return faces


def _sample_box_surface(rng, n, half, parts):
    """Uniform samples on the boundary of a union of axis boxes given in the
    normalized frame, returned in the metric object frame with normals."""
    faces = []
    for lo, hi in parts:
        faces.extend(_box_faces(lo * half, hi * half))
    areas = []
    for axis, _, _, lo, hi in faces:
        o = [a for a in range(3) if a != axis]
        areas.append((hi[o[0]] - lo[o[0]]) * (hi[o[1]] - lo[o[1]]))
    areas = np.asarray(areas)
    pick = rng.choice(len(faces), size=n, p=areas / areas.sum())
    r = rng.uniform(0.0, 1.0, size=(n, 3))
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    for f, (axis, sign, val, lo, hi) in enumerate(faces):
        sel = pick == f
        p = lo + r[sel] * (hi - lo)
        p[:, axis] = val
        pts[sel] = p
        nrm[sel, axis] = sign
    if len(parts) > 1:
        keep = np.ones(n, dtype=bool)
        for f, (_, _, _, lo, hi) in enumerate(faces):
            sel = pick == f
            for plo, phi in parts:
                plo, phi = plo * half, phi * half
                if np.array_equal(plo, lo) and np.array_equal(phi, hi):
                    continue
                inside = np.all((pts >= plo) & (pts <= phi), axis=1)
                keep &= ~(sel & inside)
        pts, nrm = pts[keep], nrm[keep]
    return pts, nrm


def _sample_ellipsoid(rng, n, half):
    a = half
    out_p, out_n = [], []
    # max area stretch of the map sphere -> ellipsoid
    bound = np.prod(a) / np.min(a)
    need = n
    while need > 0:
        m = max(2 * need, 64)
        v = rng.normal(size=(m, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        stretch = np.prod(a) * np.linalg.norm(v / a, axis=1)
        acc = rng.uniform(0.0, bound, m) < stretch
        v = v[acc][:need]
        p = v * a
        nn = p / a**2
        nn /= np.linalg.norm(nn, axis=1, keepdims=True)
        out_p.append(p)
        out_n.append(nn)
        need -= len(v)
    return np.concatenate(out_p), np.concatenate(out_n)


def _ellipse_perimeter(a, b, m=4096):
    th = (np.arange(m) + 0.5) * (2 * np.pi / m)
    return float(np.mean(np.hypot(a * np.sin(th), b * np.cos(th))) * 2 * np.pi)


def _sample_cylinder(rng, n, half):
    a, b, c = half
    side = _ellipse_perimeter(a, b) * 2 * c
    cap = np.pi * a * b
    areas = np.array([side, cap, cap])
    pick = rng.choice(3, size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    ns = int(np.count_nonzero(pick == 0))
    if ns:
        th = []
        bound = max(a, b)
        while len(th) < ns:
            t = rng.uniform(0, 2 * np.pi, 2 * ns)
            w = np.hypot(a * np.sin(t), b * np.cos(t))
            th.extend(t[rng.uniform(0, bound, len(t)) < w][: ns - len(th)])
        th = np.asarray(th)
        z = rng.uniform(-c, c, ns)
        p = np.stack([a * np.cos(th), b * np.sin(th), z], axis=1)
        nn = np.stack([np.cos(th) / a, np.sin(th) / b, np.zeros(ns)], axis=1)
        nn /= np.linalg.norm(nn, axis=1, keepdims=True)
        pts[pick == 0], nrm[pick == 0] = p, nn
    for k, sign in ((1, -1.0), (2, 1.0)):
        sel = pick == k
        m = int(np.count_nonzero(sel))
        if m:
            rad = np.sqrt(rng.uniform(0, 1, m))
            t = rng.uniform(0, 2 * np.pi, m)
            pts[sel] = np.stack([a * rad * np.cos(t), b * rad * np.sin(t), np.full(m, sign * c)], axis=1)
            nrm[sel, 2] = sign
    return pts, nrm


def _sample_shape(rng, shape, n, size):
    half = np.asarray(size, dtype=np.float64) / 2.0
    if shape == "box_shell":
        return _sample_box_surface(rng, n, half, ((-np.ones(3), np.ones(3)),))
    if shape == "composite_car":
        return _sample_box_surface(rng, n, half, _CAR_PARTS)
    if shape == "ellipsoid":
        return _sample_ellipsoid(rng, n, half)
    return _sample_cylinder(rng, n, half)


def _visible(points, normals, vis: VisibilityConfig):
    ego = np.asarray(vis.ego_position, dtype=np.float64)
    to_ego = ego - points
    keep = np.linalg.norm(to_ego, axis=1) <= vis.max_range
    if vis.mode == "front_facing":
        keep &= np.einsum("ij,ij->i", normals, to_ego) > 0.0
    return keep


def sample_surface(
    obj: SceneObject,
    n: int,
    vis: VisibilityConfig = VisibilityConfig(mode="full"),
    seed: int = 0,
) -> PointCloud:
    """Uniform-by-area surface samples of ``obj`` in the ego frame.

    Candidates failing visibility are redrawn until ``n`` are accepted or
    ``10 n`` candidates have been drawn; whatever was accepted is returned.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _rng(seed, 1)
    budget = 10 * n
    drawn = 0
    acc = []
    count = 0
    while count < n and drawn < budget:
        m = min(max(n - count, 16) * 2, budget - drawn)
        local, nrm = _sample_shape(rng, obj.shape, m, obj.box.size)
        m = len(local)
        drawn += m
        pts = transform_point(obj.box.pose, local)
        nrm_w = nrm @ obj.box.pose.matrix.T
        keep = _visible(pts, nrm_w, vis)
        acc.append(pts[keep])
        count += int(np.count_nonzero(keep))
    pts = np.concatenate(acc)[:n] if acc else np.zeros((0, 3))
    return PointCloud(pts, obj.class_id)


def sample_background(scene: SceneSpec, density: float, vis: VisibilityConfig, seed: int = 0):
    """Ground and wall samples (``density`` points per m²) that pass visibility.

    Returns ``(points, labels)``.
    """
    rng = _rng(seed, 2)
    b = scene.bounds
    area = float(np.prod(b.max[:2] - b.min[:2]))
    n = int(np.ceil(density * area))
    xy = rng.uniform(b.min[:2], b.max[:2], size=(n, 2))
    pts = [np.column_stack([xy, np.full(n, scene.ground_z)])]
    nrm = [np.tile([0.0, 0.0, 1.0], (n, 1))]
    labels = [np.full(n, GROUND)]
    for w in scene.walls:
        s, e = np.asarray(w.start, float), np.asarray(w.end, float)
        length = float(np.linalg.norm(e - s))
        m = int(np.ceil(density * length * w.height))
        if m == 0:
            continue
        t = rng.uniform(0, 1, m)
        z = scene.ground_z + rng.uniform(0, w.height, m)
        p = np.column_stack([s + t[:, None] * (e - s), z])
        d = (e - s) / length
        normal = np.array([-d[1], d[0], 0.0])
        # orient towards the ego so one face of the segment is visible
        ego = np.asarray(vis.ego_position, float)
        if np.dot(normal, ego - p[0]) < 0:
            normal = -normal
        pts.append(p)
        nrm.append(np.tile(normal, (m, 1)))
        labels.append(np.full(m, w.class_id))
    pts, nrm, labels = np.concatenate(pts), np.concatenate(nrm), np.concatenate(labels)
    keep = _visible(pts, nrm, vis)
    return pts[keep], labels[keep]


OBJECT_POINT_DENSITY = 20.0
BACKGROUND_POINT_DENSITY = 2.0


def _surface_area(obj: SceneObject):
    h, w, d = obj.box.size
    return 2.0 * (h * w + h * d + w * d)


def visible_points(
    scene: SceneSpec,
    vis: VisibilityConfig = VisibilityConfig(),
    object_density: float = OBJECT_POINT_DENSITY,
    background_density: float = BACKGROUND_POINT_DENSITY,
    seed: int = 0,
):
    """All visible surface samples of a scene as ``(points, labels)``."""
    pts, labels = [], []
    for i, obj in enumerate(scene.objects):
        n = max(16, int(np.ceil(object_density * _surface_area(obj))))
        cloud = sample_surface(obj, n, vis, seed=int(seed) * 1_000_003 + scene.seed * 1009 + i)
        pts.append(cloud.points)
        labels.append(np.full(len(cloud), obj.class_id))
    bp, bl = sample_background(scene, background_density, vis, seed=int(seed) * 1_000_003 + scene.seed)
    pts.append(bp)
    labels.append(bl)
    return np.concatenate(pts), np.concatenate(labels).astype(np.int64)


# --------------------------------------------------------------------------
# ground truth


def _floor_index(x):
    return np.floor(np.asarray(x) + 1e-9).astype(np.int64)


def rasterize_gt(scene: SceneSpec, spec: GridSpec, class_count: int = CLASS_COUNT) -> SemanticVoxelGrid:
    """Label cells by analytic geometry.

    Object cells: cell center inside the solid. Ground and walls: cells that
    contain the surface. Objects win over background.
    """
    labels = np.zeros(spec.dims, dtype=np.uint8)
    vs = spec.voxel_size
    k0 = int(_floor_index((scene.ground_z - spec.origin[2]) / vs))
    if 0 <= k0 < spec.dims[2]:
        labels[:, :, k0] = GROUND
    for w in scene.walls:
        s, e = np.asarray(w.start, float), np.asarray(w.end, float)
        length = float(np.linalg.norm(e - s))
        step = vs / 4.0
        t = np.linspace(0.0, 1.0, max(2, int(np.ceil(length / step)) + 1))
        z = scene.ground_z + np.linspace(0.0, w.height, max(2, int(np.ceil(w.height / step)) + 1))
        xy = s + t[:, None] * (e - s)
        P = np.column_stack([np.repeat(xy, len(z), axis=0), np.tile(z, len(xy))])
        idx = _floor_index(world_to_grid(spec, P))
        ok = np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=1)
        idx = idx[ok]
        labels[idx[:, 0], idx[:, 1], idx[:, 2]] = w.class_id
    for obj in scene.objects:
        idx = _object_cells(obj, spec)
        labels[idx[:, 0], idx[:, 1], idx[:, 2]] = obj.class_id
    return SemanticVoxelGrid(spec, labels, class_count)


def _object_cells(obj: SceneObject, spec: GridSpec):
    """Indices ``(n, 3)`` of cells of ``spec`` whose centers lie in the solid."""
    corners = box_corners(obj.box)
    vs = spec.voxel_size
    lo = np.maximum(np.floor(world_to_grid(spec, corners.min(axis=0)) - 0.5).astype(int), 0)
    hi = np.minimum(np.ceil(world_to_grid(spec, corners.max(axis=0)) + 0.5).astype(int), np.asarray(spec.dims))
    if np.any(hi <= lo):
        return np.zeros((0, 3), dtype=int)
    ijk = np.stack(np.meshgrid(*[np.arange(lo[a], hi[a]) for a in range(3)], indexing="ij"), axis=-1).reshape(-1, 3)
    centers = np.asarray(spec.origin) + (ijk + 0.5) * vs
    return ijk[inside_solid(obj, centers)]


def gt_object_clouds(scene: SceneSpec, spec: GridSpec):
    """Ground-truth object clouds, ``[(PointCloud, box), ...]``.

    Each cloud holds the centers of the cells of ``spec`` whose centers lie
    inside the object solid, i.e. the object's rasterized occupancy read
    back as points. Objects too thin to cover any cell center fall back to
    the single cell that holds the box center.
    """
    out = []
    for obj in scene.objects:
        idx = _object_cells(obj, spec)
        if len(idx) == 0:
            idx = np.floor(world_to_grid(spec, obj.box.center)).astype(int)[None, :]
        pts = np.asarray(spec.origin) + (idx + 0.5) * spec.voxel_size
        out.append((PointCloud(pts, obj.class_id), obj.box))
    return out


def surface_object_clouds(scene: SceneSpec, n_points: int = 2500, seed: int = 0):
    """Full-visibility surface samples per object, ``[(PointCloud, box), ...]``.

    These are the shape targets for the folding decoder.
    """
    vis = VisibilityConfig(mode="full")
    return [
        (sample_surface(o, n_points, vis, seed=int(seed) * 7919 + scene.seed * 131 + i), o.box)
        for i, o in enumerate(scene.objects)
    ]


# --------------------------------------------------------------------------
# feature encoder

TDF_CAP = 1.0
COUNT_RADIUS = 0.4
CLASS_RADIUS = 0.4
DESCRIPTOR_LABELS = tuple(OBJECT_CLASS_IDS) + (GROUND, WALL)


def descriptor_layout(C_vox: int):
    """Human-readable meaning of every descriptor channel."""
    names = ["tdf", "count_0.4"]
    for k in range(2, min(C_vox, 5)):
        names.append("offset_" + "xyz"[k - 2])
    for m in range(max(0, C_vox - 5)):
        label = DESCRIPTOR_LABELS[m % len(DESCRIPTOR_LABELS)]
        radius = CLASS_RADIUS * 2 ** (m // len(DESCRIPTOR_LABELS))
        names.append(f"class{label}_r{radius:g}")
    return names


def _descriptor(centers, points, labels, C_vox):
    n = len(centers)
    out = np.zeros((n, C_vox))
    if len(points) == 0:
        out[:, 0] = TDF_CAP
        return out
    tree = cKDTree(points)
    d, idx = tree.query(centers, k=1, distance_upper_bound=TDF_CAP)
    near = np.isfinite(d)
    # recompute exactly from coordinates
    dist = np.full(n, TDF_CAP)
    off = np.zeros((n, 3))
    if np.any(near):
        delta = points[idx[near]] - centers[near]
        dist[near] = np.minimum(np.sqrt(np.sum(delta * delta, axis=1)), TDF_CAP)
        off[near] = delta
    out[:, 0] = dist
    counts = np.asarray(tree.query_ball_point(centers, COUNT_RADIUS, return_length=True), dtype=np.float64)
    out[:, 1] = counts / (counts + 4.0)
    for k in range(2, min(C_vox, 5)):
        out[:, k] = off[:, k - 2]
    trees = {}
    for m in range(max(0, C_vox - 5)):
        label = DESCRIPTOR_LABELS[m % len(DESCRIPTOR_LABELS)]
        radius = CLASS_RADIUS * 2 ** (m // len(DESCRIPTOR_LABELS))
        if label not in trees:
            sel = points[labels == label]
            trees[label] = cKDTree(sel) if len(sel) else None
        t = trees[label]
        if t is None:
            continue
        dd, _ = t.query(centers, k=1, distance_upper_bound=radius)
        out[:, 5 + m] = np.isfinite(dd).astype(np.float64)
    return out


def encode_features(
    scene: SceneSpec,
    vis: VisibilityConfig,
    spec: GridSpec,
    C_vox: int = 32,
    temporal: bool = False,
    ego_displacement=(-2.0, 0.0, 0.0),
    seed: int = 0,
    points=None,
):
    """Geometric descriptor volume built from visible surface samples.

    Channel 0 is the distance to the nearest visible point capped at
    ``TDF_CAP``; channel 1 the saturating point count within
    ``COUNT_RADIUS``; channels 2-4 the offset to the nearest point (zero
    beyond the cap); the rest flag whether a point of each label lies
    within a radius that doubles every ``len(DESCRIPTOR_LABELS)`` channels.

    With ``temporal=True`` returns ``(F_prev, F_cur)`` where the previous
    frame sees the same scene from an ego displaced by ``ego_displacement``.
    ``points`` may pass precomputed ``(points, labels)`` for the current frame.
    """
    if C_vox < 4:
        raise ValueError("C_vox must be >= 4")
    centers = spec.cell_centers().reshape(-1, 3)

    def volume(v, pts_labels, s):
        pts, lab = pts_labels if pts_labels is not None else visible_points(scene, v, seed=s)
        data = _descriptor(centers, pts, lab, C_vox).reshape(*spec.dims, C_vox)
        return FeatureVolume(spec, data)

    F_cur = volume(vis, points, seed)
    if not temporal:
        return F_cur
    prev_vis = replace(vis, ego_position=tuple(np.asarray(vis.ego_position, float) + np.asarray(ego_displacement, float)))
    F_prev = volume(prev_vis, None, seed + 1)
    return F_prev, F_cur


# --------------------------------------------------------------------------
# oracle detector


def oracle_detect(scene: SceneSpec, noise: DetectorNoise = DetectorNoise()):
    """Ground-truth boxes with drop-out, pose/size jitter and class flips."""
    rng = _rng(noise.seed, scene.seed, 3)
    out = []
    n_cls = len(OBJECT_CLASS_IDS)
    for obj in scene.objects:
        # fixed number of draws per object keeps the stream aligned
        u_drop = rng.uniform()
        dt = rng.normal(size=3)
        dyaw = rng.normal()
        ds = rng.normal(size=3)
        u_flip = rng.uniform()
        other = int(rng.integers(n_cls - 1))
        if u_drop < noise.drop_prob:
            continue
        box = obj.box
        pose = box.pose
        if noise.sigma_translation > 0 or noise.sigma_yaw > 0:
            t = pose.translation + noise.sigma_translation * dt
            q = pose.rotation
            if noise.sigma_yaw > 0:
                q = quat_multiply(quat_from_yaw(noise.sigma_yaw * dyaw), q)
            pose = Pose(t, q)
        size = box.size
        if noise.sigma_size_rel > 0:
            size = size * np.maximum(1.0 + noise.sigma_size_rel * ds, 1e-3)
        cid = box.class_id
        if u_flip < noise.class_flip_prob:
            choices = [c for c in OBJECT_CLASS_IDS if c != cid]
            cid = choices[other]
        out.append(OrientedBox3(pose, size, cid, 1.0 - noise.drop_prob))
    return out
