import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaocc.geometry import CLOSE_RANGE, GridSpec, OrientedBox3, Pose, SceneBounds
from adaocc.losses import chamfer
from adaocc.metrics import MetricsReport, evaluate, hausdorff, iou, match_objects, miou
from adaocc.voxel import AdaptiveMap, PointCloud, SemanticVoxelGrid


def _grid(labels, vs=0.2, C=12):
    labels = np.asarray(labels)
    return SemanticVoxelGrid(GridSpec([0, 0, 0], vs, labels.shape), labels, C)


def _random_labels(rng, shape, C=4, p_free=0.5):
    lab = rng.integers(1, C + 1, size=shape)
    lab[rng.random(shape) < p_free] = 0
    return lab


def brute_hausdorff(X, Y):
    D = np.sqrt(((X[:, None, :] - Y[None, :, :]) ** 2).sum(-1))
    return max(D.min(axis=1).max(), D.min(axis=0).max())


def brute_iou(a, b):
    inter = union = 0
    for x, y in zip(a.ravel(), b.ravel()):
        inter += (x > 0) and (y > 0)
        union += (x > 0) or (y > 0)
    return 1.0 if union == 0 else inter / union


# iou / miou ------------------------------------------------------------------------


def test_iou_examples():
    a = np.zeros((3, 1, 1))
    b = np.zeros((3, 1, 1))
    assert iou(_grid(a), _grid(b)) == 1.0
    a[0] = a[1] = 1
    b[1] = b[2] = 2
    assert iou(_grid(a), _grid(b)) == pytest.approx(1 / 3)
    assert iou(_grid(a), _grid(a)) == 1.0
    assert iou(_grid(a), _grid(np.zeros((3, 1, 1)))) == 0.0
    c = np.zeros((3, 1, 1))
    c[2] = 1
    assert iou(_grid(a), _grid(c)) == 0.0


def test_iou_spec_mismatch():
    with pytest.raises(ValueError):
        iou(_grid(np.zeros((2, 2, 2))), _grid(np.zeros((2, 2, 2)), vs=0.4))


def test_iou_matches_brute_force(rng):
    for _ in range(100):
        shape = tuple(rng.integers(1, 33, 3))
        a = _random_labels(rng, shape, p_free=rng.uniform(0, 1))
        b = _random_labels(rng, shape, p_free=rng.uniform(0, 1))
        assert iou(_grid(a), _grid(b)) == pytest.approx(brute_iou(a, b), rel=1e-15)


def test_miou_matches_brute_force(rng):
    for _ in range(100):
        shape = tuple(rng.integers(1, 17, 3))
        a = _random_labels(rng, shape, C=5)
        b = _random_labels(rng, shape, C=5)
        mean, per = miou(_grid(a), _grid(b), range(1, 6))
        vals = {}
        for c in range(1, 6):
            inter = int(np.sum((a == c) & (b == c)))
            union = int(np.sum((a == c) | (b == c)))
            if union:
                vals[c] = inter / union
        assert per == pytest.approx(vals)
        assert mean == pytest.approx(np.mean(list(vals.values())))


def test_miou_examples():
    a = np.array([1, 2, 0]).reshape(3, 1, 1)
    assert miou(_grid(a), _grid(a), [1, 2, 3])[0] == 1.0
    b = np.array([1, 0, 2]).reshape(3, 1, 1)
    mean, per = miou(_grid(b), _grid(a), [1, 2])
    assert per == {1: 1.0, 2: 0.0} and mean == 0.5
    with pytest.raises(ValueError):
        miou(_grid(a), _grid(a), [])


@given(st.integers(0, 2**31))
def test_iou_symmetric_and_monotone(seed):
    rng = np.random.default_rng(seed)
    a = _random_labels(rng, (6, 6, 6))
    b = _random_labels(rng, (6, 6, 6))
    base = iou(_grid(a), _grid(b))
    assert base == iou(_grid(b), _grid(a))
    _, per = miou(_grid(a), _grid(b), range(1, 5))
    assert all(0 <= v <= 1 for v in per.values())
    # add a correct cell
    missing = np.argwhere((a == 0) & (b > 0))
    if len(missing):
        a2 = a.copy()
        a2[tuple(missing[0])] = 1
        assert iou(_grid(a2), _grid(b)) >= base
    wrong = np.argwhere((a == 0) & (b == 0))
    if len(wrong):
        a3 = a.copy()
        a3[tuple(wrong[0])] = 1
        assert iou(_grid(a3), _grid(b)) <= base


# hausdorff ---------------------------------------------------------------------------


def test_hausdorff_examples(rng):
    X = rng.normal(size=(10, 3))
    assert hausdorff(X, X) == 0.0
    assert hausdorff(np.array([[0, 0, 0], [2, 0, 0.0]]), np.array([[0, 0, 0.0]])) == 2.0
    with pytest.raises(ValueError):
        hausdorff(np.zeros((0, 3)), X)


def test_hausdorff_matches_brute_force(rng):
    for _ in range(100):
        X = rng.normal(size=(int(rng.integers(1, 65)), 3)) * rng.uniform(0.01, 100)
        Y = rng.normal(size=(int(rng.integers(1, 65)), 3))
        assert hausdorff(X, Y) == pytest.approx(brute_hausdorff(X, Y), rel=1e-12)


@given(st.integers(0, 2**31))
def test_hausdorff_symmetric_and_bounds_chamfer(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(int(rng.integers(1, 40)), 3))
    Y = rng.normal(size=(int(rng.integers(1, 40)), 3))
    h = hausdorff(X, Y)
    assert h == hausdorff(Y, X)
    assert h**2 >= chamfer(X, Y, return_grad=False) / (len(X) + len(Y)) - 1e-12


# matching ---------------------------------------------------------------------------


def _brute_best(cost):
    n, m = cost.shape
    best = np.inf
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            best = min(best, sum(cost[i, perm[i]] for i in range(n)))
    else:
        for perm in itertools.permutations(range(n), m):
            best = min(best, sum(cost[perm[j], j] for j in range(m)))
    return best


def test_matching_identity(rng):
    c = rng.normal(size=(5, 3))
    m = match_objects(c, c)
    assert sorted((i, j) for i, j, _ in m.pairs) == [(i, i) for i in range(5)]
    assert m.assignment_cost == 0.0


def test_matching_picks_nearer():
    m = match_objects([[0, 0, 0]], [[3, 0, 0], [1, 0, 0]])
    assert m.pairs[0][:2] == (0, 1) and m.unmatched_gt == [0]


def test_matching_gate():
    m = match_objects([[0, 0, 0]], [[5, 0, 0]])
    assert m.pairs == [] and m.unmatched_pred == [0] and m.unmatched_gt == [0]


def test_matching_empty_sides():
    m = match_objects([], [[0, 0, 0]])
    assert m.pairs == [] and m.unmatched_gt == [0]


def test_matching_equals_permutation_brute_force(rng):
    for _ in range(60):
        n, k = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        P, G = rng.uniform(-3, 3, (n, 3)), rng.uniform(-3, 3, (k, 3))
        cost = np.linalg.norm(P[:, None] - G[None], axis=2)
        m = match_objects(P, G, gate=np.inf)
        assert m.assignment_cost == pytest.approx(_brute_best(cost), rel=1e-12)
        assert len(m.pairs) == min(n, k)


def test_matching_accepts_boxes_and_tuples():
    b = OrientedBox3(Pose([1, 2, 3]), [1, 1, 1])
    m = match_objects([(PointCloud([[0, 0, 0]], 1), b)], [b])
    assert m.pairs[0][2] == 0.0


# evaluate ------------------------------------------------------------------------------


def _scene_grid():
    spec = GridSpec([-2, -2, -1], 0.2, (20, 20, 10))
    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[:, :, 0] = 11
    labels[8:12, 8:12, 1:5] = 4
    return SemanticVoxelGrid(spec, labels, 12)


def _gt_objects(grid):
    box = OrientedBox3(Pose([0.0, 0.0, -0.4]), [0.8, 0.8, 0.8], class_id=4)
    from adaocc.voxel import grid_to_centers

    pts, lab = grid_to_centers(grid)
    return [(PointCloud(pts[lab == 4], 4), box)]


def test_evaluate_perfect_prediction():
    g = _scene_grid()
    objs = _gt_objects(g)
    bounds = g.spec.bounds
    r = evaluate(g, g, objs, bounds, 0.2, pred_boxes=[objs[0][1]])
    assert r.iou == 1.0 and r.miou == 1.0 and r.hausdorff_mean == 0.0
    r = evaluate(AdaptiveMap(_coarse(g), [objs[0][0]], [objs[0][1]]), g, objs, bounds, 0.2)
    assert r.hausdorff_mean == 0.0


def _coarse(g):
    from adaocc.voxel import resample

    return resample(g, 0.4)


def test_evaluate_no_predicted_objects():
    g = _scene_grid()
    objs = _gt_objects(g)
    r = evaluate(g, g, objs, g.spec.bounds, 0.2)
    assert r.hausdorff_mean is None and r.hausdorff_per_object == []
    assert r.counts["unmatched_gt"] == 1 and r.counts["matched"] == 0


def test_evaluate_one_cell_mismatch_brute_force():
    g = _scene_grid()
    labels = np.array(g.labels)
    labels[0, 0, 0] = 0
    labels[5, 5, 5] = 2
    p = SemanticVoxelGrid(g.spec, labels, 12)
    r = evaluate(p, g, [], g.spec.bounds, 0.2)
    assert r.iou == pytest.approx(brute_iou(labels, g.labels))


def test_evaluate_crops_to_bounds():
    g = _scene_grid()
    labels = np.array(g.labels)
    labels[19, 19, 9] = 3  # outside the crop below
    p = SemanticVoxelGrid(g.spec, labels, 12)
    r = evaluate(p, g, [], SceneBounds([-2, -2, -1], [1.6, 1.6, 0.8]), 0.2)
    assert r.iou == 1.0


def test_report_json_fields_and_validation():
    r = MetricsReport("close_range", 0.5, 0.25, {4: 0.25}, 1.5, [1.5], {"matched": 1})
    d = json.loads(r.to_json())
    assert list(d) == ["scope", "iou", "miou", "per_class_iou", "hausdorff_mean", "hausdorff_per_object", "counts"]
    assert d["per_class_iou"] == {"car": 0.25}
    assert "Hausdorff Distance(m)" in r.to_table()
    with pytest.raises(ValueError):
        MetricsReport("x", 1.5, 0, {}, None, [])
    with pytest.raises(ValueError):
        MetricsReport("x", 0.5, 0, {}, None, [-1.0])


def test_scope_inference():
    g = _scene_grid()
    assert evaluate(g, g, [], g.spec.bounds, 0.2).scope == "close_range"
