"""Occupancy and shape metrics: IOU, mIOU, Hausdorff distance, object
matching, and range-scoped evaluation reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .classes import OBJECT_CLASS_IDS, class_name
from .geometry import CLOSE_RANGE, OrientedBox3, SceneBounds, point_in_box
from .losses import nearest_neighbors
from .voxel import AdaptiveMap, PointCloud, SemanticVoxelGrid, crop, fuse, grid_to_centers, resample

__all__ = [
    "iou",
    "miou",
    "hausdorff",
    "directed_hausdorff",
    "Matching",
    "match_objects",
    "MetricsReport",
    "evaluate",
    "grid_object_clouds",
    "MATCH_GATE",
]

MATCH_GATE = 4.0


def _check_specs(pred: SemanticVoxelGrid, gt: SemanticVoxelGrid):
    if not pred.spec.same_as(gt.spec):
        raise ValueError("prediction and ground truth grids have different specs")


def _ratio(inter, union):
    return 1.0 if union == 0 else inter / union


def iou(pred: SemanticVoxelGrid, gt: SemanticVoxelGrid) -> float:
    """Class-agnostic occupancy IOU; 1 when both grids are empty."""
    _check_specs(pred, gt)
    a, b = pred.occupied, gt.occupied
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    return _ratio(inter, union)


def miou(pred: SemanticVoxelGrid, gt: SemanticVoxelGrid, classes: Sequence[int]):
    """Mean of per-class IOUs over ``classes`` present in either grid.

    Returns ``(mean, {class_id: iou})``. The mean is 1 if no listed class
    appears in either grid.
    """
    _check_specs(pred, gt)
    classes = list(classes)
    if not classes:
        raise ValueError("class list is empty")
    pl, gl = pred.labels, gt.labels
    per_class = {}
    for c in classes:
        a, b = pl == c, gl == c
        union = int(np.count_nonzero(a | b))
        if union == 0:
            continue
        per_class[int(c)] = int(np.count_nonzero(a & b)) / union
    mean = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return mean, per_class


def _as_points(X):
    X = np.asarray(getattr(X, "points", X), dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3 or len(X) == 0:
        raise ValueError("Hausdorff distance needs two non-empty (N, 3) point sets")
    return X


def directed_hausdorff(X, Y, tree=None) -> float:
    X, Y = _as_points(X), _as_points(Y)
    _, d2 = nearest_neighbors(X, Y, tree)
    return float(np.sqrt(d2.max()))


def hausdorff(X, Y) -> float:
    """Symmetric Hausdorff distance with k-d tree nearest neighbours."""
    X, Y = _as_points(X), _as_points(Y)
    return max(directed_hausdorff(X, Y, cKDTree(Y)), directed_hausdorff(Y, X, cKDTree(X)))


def _center(obj):
    if isinstance(obj, OrientedBox3):
        return obj.center
    if isinstance(obj, tuple):
        for part in obj:
            if isinstance(part, OrientedBox3):
                return part.center
    box = getattr(obj, "box", None)
    if box is not None:
        return box.center
    return np.asarray(obj, dtype=np.float64).reshape(3)


@dataclass
class Matching:
    pairs: list  # (pred_index, gt_index, center_distance)
    unmatched_pred: list
    unmatched_gt: list
    assignment_cost: float  # total cost of the optimal assignment before gating


def match_objects(pred: Sequence, gt: Sequence, gate: float = MATCH_GATE) -> Matching:
    """Minimum total box-center distance assignment, then distance gating.

    ``pred`` and ``gt`` hold boxes, ``(cloud, box)`` tuples, or raw centers.
    Pairs farther apart than ``gate`` meters move to the unmatched lists.
    """
    pc = np.array([_center(o) for o in pred]).reshape(-1, 3)
    gc = np.array([_center(o) for o in gt]).reshape(-1, 3)
    if len(pc) == 0 or len(gc) == 0:
        return Matching([], list(range(len(pc))), list(range(len(gc))), 0.0)
    cost = np.linalg.norm(pc[:, None, :] - gc[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    total = float(cost[rows, cols].sum())
    pairs, um_p, um_g = [], set(range(len(pc))), set(range(len(gc)))
    for r, c in zip(rows, cols):
        d = float(cost[r, c])
        if d <= gate:
            pairs.append((int(r), int(c), d))
            um_p.discard(int(r))
            um_g.discard(int(c))
    return Matching(pairs, sorted(um_p), sorted(um_g), total)


@dataclass
class MetricsReport:
    scope: str
    iou: float
    miou: float
    per_class_iou: dict
    hausdorff_mean: Optional[float]
    hausdorff_per_object: list
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in [self.iou, self.miou, *self.per_class_iou.values()]:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"IOU values must lie in [0, 1], got {v}")
        if any(h < 0 for h in self.hausdorff_per_object):
            raise ValueError("Hausdorff distances must be non-negative")

    def to_dict(self):
        return {
            "scope": self.scope,
            "iou": self.iou,
            "miou": self.miou,
            "per_class_iou": {class_name(int(k)): v for k, v in sorted(self.per_class_iou.items())},
            "hausdorff_mean": self.hausdorff_mean,
            "hausdorff_per_object": list(self.hausdorff_per_object),
            "counts": dict(self.counts),
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=False)

    def to_table(self):
        """Plain-text summary: one overall row, then per-class IOUs."""
        hd = "-" if self.hausdorff_mean is None else f"{self.hausdorff_mean:.3f}"
        head = ["Scope", "Hausdorff Distance(m)", "IOU", "mIOU"]
        row = [self.scope, hd, f"{self.iou:.3f}", f"{self.miou:.3f}"]
        widths = [max(len(h), len(r)) for h, r in zip(head, row)]
        lines = [
            "  ".join(h.ljust(w) for h, w in zip(head, widths)),
            "  ".join(r.ljust(w) for r, w in zip(row, widths)),
        ]
        if self.per_class_iou:
            names = [class_name(int(k)) for k in sorted(self.per_class_iou)]
            vals = [f"{self.per_class_iou[k]:.3f}" for k in sorted(self.per_class_iou)]
            cw = [max(len(n), len(v)) for n, v in zip(names, vals)]
            lines.append("")
            lines.append("  ".join(["Class".ljust(5)] + [n.ljust(w) for n, w in zip(names, cw)]))
            lines.append("  ".join(["IOU".ljust(5)] + [v.ljust(w) for v, w in zip(vals, cw)]))
        return "\n".join(lines)


def grid_object_clouds(grid: SemanticVoxelGrid, boxes: Sequence[OrientedBox3], labels=OBJECT_CLASS_IDS):
    """Centers of cells carrying one of ``labels`` that fall inside each box.

    Returns one ``PointCloud`` per box, possibly empty.
    """
    pts, lab = grid_to_centers(grid)
    if labels is not None:
        keep = np.isin(lab, np.asarray(labels))
        pts = pts[keep]
    clouds = []
    for box in boxes:
        if len(pts) == 0:
            inside = np.zeros(0, dtype=bool)
        else:
            inside = point_in_box(box, pts)
        clouds.append(PointCloud(pts[inside], box.class_id))
    return clouds


def _box_of(obj):
    if isinstance(obj, tuple):
        return next(p for p in obj if isinstance(p, OrientedBox3))
    return obj


def _cloud_of(obj):
    if isinstance(obj, tuple):
        return next(p for p in obj if isinstance(p, PointCloud))
    return obj


def evaluate(
    pred,
    gt: SemanticVoxelGrid,
    gt_objects: Sequence,
    bounds: SceneBounds,
    eval_voxel: float = 0.2,
    pred_boxes: Optional[Sequence[OrientedBox3]] = None,
    classes: Optional[Sequence[int]] = None,
    gate: float = MATCH_GATE,
    scope: Optional[str] = None,
) -> MetricsReport:
    """Score a prediction against ground truth inside ``bounds``.

    ``pred`` is a grid or an :class:`AdaptiveMap`. Adaptive maps are fused
    at ``eval_voxel`` and their raw object clouds are used for Hausdorff;
    for plain grids the object clouds are the occupied cell centers inside
    ``pred_boxes``. ``gt_objects`` is a list of ``(PointCloud, OrientedBox3)``.
    Objects take part when their box center lies inside ``bounds``.
    """
    if isinstance(pred, AdaptiveMap):
        pred_grid = fuse(pred.coarse, pred.objects, eval_voxel)
        pred_objs = list(zip(pred.objects, pred.boxes)) if pred.boxes else []
    else:
        pred_grid = resample(pred, eval_voxel)
        boxes = list(pred_boxes or [])
        pred_objs = list(zip(grid_object_clouds(pred_grid, boxes), boxes))
    gt_grid = resample(gt, eval_voxel)
    p_crop = crop(pred_grid, bounds)
    g_crop = crop(gt_grid, bounds)
    if classes is None:
        classes = OBJECT_CLASS_IDS
    overall = iou(p_crop, g_crop)
    mean_c, per_class = miou(p_crop, g_crop, classes)

    pred_in = [o for o in pred_objs if bounds.contains(_box_of(o).center)]
    empty_pred = sum(1 for o in pred_in if len(_cloud_of(o)) == 0)
    pred_in = [o for o in pred_in if len(_cloud_of(o)) > 0]
    gt_in = [o for o in gt_objects if bounds.contains(_box_of(o).center)]
    m = match_objects([_box_of(o) for o in pred_in], [_box_of(o) for o in gt_in], gate)
    hd = [hausdorff(_cloud_of(pred_in[i]), _cloud_of(gt_in[j])) for i, j, _ in m.pairs]
    if scope is None:
        inside = np.all(bounds.min >= CLOSE_RANGE.min - 1e-9) and np.all(bounds.max <= CLOSE_RANGE.max + 1e-9)
        scope = "close_range" if inside else "full_range"
    counts = {
        "predicted_objects": len(pred_in) + empty_pred,
        "gt_objects": len(gt_in),
        "matched": len(m.pairs),
        "unmatched_predicted": len(m.unmatched_pred) + empty_pred,
        "unmatched_gt": len(m.unmatched_gt),
        "occupied_pred": p_crop.occupied_count,
        "occupied_gt": g_crop.occupied_count,
    }
    return MetricsReport(
        scope=scope,
        iou=overall,
        miou=mean_c,
        per_class_iou=per_class,
        hausdorff_mean=float(np.mean(hd)) if hd else None,
        hausdorff_per_object=hd,
        counts=counts,
    )
