import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaocc.features import (
    BoxFeaturePooler,
    FeatureVolume,
    inside_hull,
    interpolate,
    interpolate_many,
    pool_features,
    sample_object_feature,
)
from adaocc.geometry import GridSpec, OrientedBox3, Pose, box_sampling_grid

MODES = ("tricubic", "trilinear")


def _volume(rng, dims=(6, 5, 4), C=3, origin=(-0.6, -0.5, -0.4), vs=0.2):
    return FeatureVolume(GridSpec(origin, vs, dims), rng.normal(size=dims + (C,)))


def _node_centers(spec):
    ii, jj, kk = np.meshgrid(*[np.arange(d) for d in spec.dims], indexing="ij")
    return spec.origin + (np.stack([ii, jj, kk], -1) + 0.5) * spec.voxel_size


def _linear_field(spec, coef, offset):
    c = _node_centers(spec)
    return FeatureVolume(spec, (c @ np.asarray(coef, float) + offset)[..., None])


def test_volume_validation():
    spec = GridSpec([0, 0, 0], 1, (2, 2, 2))
    with pytest.raises(ValueError):
        FeatureVolume(spec, np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        FeatureVolume(spec, np.full((2, 2, 2, 1), np.inf))


@pytest.mark.parametrize("mode", MODES)
def test_exact_at_nodes(rng, mode):
    F = _volume(rng)
    centers = _node_centers(F.spec).reshape(-1, 3)
    got = interpolate_many(F, centers, mode)
    np.testing.assert_allclose(got, F.data.reshape(-1, F.channels), atol=1e-12)


@pytest.mark.parametrize("mode", MODES)
def test_constant_field(rng, mode):
    spec = GridSpec([0, 0, 0], 0.5, (4, 3, 5))
    v = np.array([1.5, -2.0])
    F = FeatureVolume(spec, np.broadcast_to(v, spec.dims + (2,)))
    pts = rng.uniform(0, 1, size=(100, 3)) * np.array([2, 1.5, 2.5])
    np.testing.assert_allclose(interpolate_many(F, pts, mode), np.broadcast_to(v, (100, 2)), atol=1e-12)


@pytest.mark.parametrize("mode", MODES)
@given(seed=st.integers(0, 2**31))
def test_linear_precision(mode, seed):
    rng = np.random.default_rng(seed)
    spec = GridSpec(rng.uniform(-2, 2, 3), float(rng.uniform(0.1, 1.0)), (5, 4, 6))
    coef = rng.normal(size=3)
    F = _linear_field(spec, coef, 0.7)
    u = rng.uniform(0, 1, size=(30, 3)) * (np.array(spec.dims) - 1)
    pts = spec.origin + (u + 0.5) * spec.voxel_size
    np.testing.assert_allclose(interpolate_many(F, pts, mode)[:, 0], pts @ coef + 0.7, atol=1e-9)


def test_x_coordinate_field():
    spec = GridSpec([0, 0, 0], 0.2, (6, 6, 6))
    F = _linear_field(spec, [1, 0, 0], 0.0)
    for mode in MODES:
        assert interpolate(F, [0.37, 0.51, 0.66], mode)[0] == pytest.approx(0.37, abs=1e-9)


def test_tricubic_differs_from_trilinear_on_curved_field():
    spec = GridSpec([0, 0, 0], 1.0, (6, 1, 1))
    x = np.arange(6) + 0.5
    F = FeatureVolume(spec, (x**3).reshape(6, 1, 1, 1))
    p = [2.75, 0.5, 0.5]
    cubic = interpolate(F, p, "tricubic")[0]
    lin = interpolate(F, p, "trilinear")[0]
    # Catmull-Rom reproduces quadratics, so it is much closer to x^3 here
    assert abs(cubic - 2.75**3) < abs(lin - 2.75**3)


def test_near_boundary_clamps_and_beyond_extent_errors(rng):
    F = _volume(rng)
    edge = F.spec.origin + 0.01
    np.testing.assert_allclose(interpolate(F, edge), F.data[0, 0, 0], atol=1e-12)
    with pytest.raises(ValueError):
        interpolate(F, F.spec.origin - 0.1)


def test_unknown_mode(rng):
    with pytest.raises(ValueError):
        interpolate(_volume(rng), [0, 0, 0], "nearest")


def test_bev_plane_interpolation(rng):
    spec = GridSpec([0, 0, 0], 1.0, (4, 4, 1))
    F = FeatureVolume(spec, rng.normal(size=(4, 4, 1, 2)))
    np.testing.assert_allclose(interpolate(F, [1.5, 2.5, 0.9]), F.data[1, 2, 0], atol=1e-12)


# pooling -----------------------------------------------------------------------


def test_constant_field_pooling():
    spec = GridSpec([-2, -2, -2], 0.5, (8, 8, 8))
    v = np.array([1.0, 3.0, -1.0])
    F = FeatureVolume(spec, np.broadcast_to(v, spec.dims + (3,)))
    box = OrientedBox3(Pose.from_yaw([0, 0, 0], 0.3), [1.5, 1.0, 1.0])
    np.testing.assert_allclose(sample_object_feature(F, box, 4, "max"), v)
    np.testing.assert_allclose(sample_object_feature(F, box, 4, "avg"), v)
    np.testing.assert_allclose(sample_object_feature(F, box, 4, "global_mean"), np.full(3, v.mean()))
    np.testing.assert_allclose(sample_object_feature(F, box, 4, "global_max"), np.full(3, v.max()))


def test_max_pooling_linear_field_matches_explicit_loop():
    spec = GridSpec([-2, -2, -2], 0.25, (16, 16, 16))
    centers = _node_centers(spec)
    data = np.stack([centers[..., 0], -centers[..., 0], 2 * centers[..., 0] + 1], axis=-1)
    F = FeatureVolume(spec, data)
    box = OrientedBox3(Pose([0.1, -0.2, 0.3]), [1.2, 0.8, 0.6])
    lattice = box_sampling_grid(box, 5)
    oracle = np.full(3, -np.inf)
    for p in lattice:
        oracle = np.maximum(oracle, interpolate(F, p))
    got = sample_object_feature(F, box, 5, "max")
    np.testing.assert_allclose(got, oracle, atol=1e-12)
    # channel 0 peaks at the largest-x lattice point
    xmax = lattice[np.argmax(lattice[:, 0])]
    assert got[0] == pytest.approx(interpolate(F, xmax)[0], abs=1e-12)


@pytest.mark.parametrize("pooling", ["max", "avg", "global_max", "global_mean"])
def test_single_point_lattice_is_center_value(rng, pooling):
    F = _volume(rng, dims=(8, 8, 8), origin=(-0.8, -0.8, -0.8))
    box = OrientedBox3(Pose([0.05, -0.1, 0.12]), [0.5, 0.5, 0.5])
    v = interpolate(F, box.center)
    got = sample_object_feature(F, box, 1, pooling)
    if pooling in ("max", "avg"):
        np.testing.assert_allclose(got, v, atol=1e-12)
    else:
        np.testing.assert_allclose(got, np.full(F.channels, v.max() if pooling == "global_max" else v.mean()))


def test_box_outside_volume(rng):
    F = _volume(rng)
    with pytest.raises(ValueError, match="box outside feature volume"):
        sample_object_feature(F, OrientedBox3(Pose([50, 0, 0]), [1, 1, 1]))


def test_out_of_hull_points_excluded(rng):
    spec = GridSpec([0, 0, 0], 1.0, (4, 4, 4))
    F = FeatureVolume(spec, rng.normal(size=(4, 4, 4, 2)))
    box = OrientedBox3(Pose([0.5, 2.0, 2.0]), [2.0, 1.0, 1.0])
    lattice = box_sampling_grid(box, 3)
    keep = inside_hull(spec, lattice)
    assert 0 < keep.sum() < len(lattice)
    oracle = interpolate_many(F, lattice[keep]).max(axis=0)
    np.testing.assert_allclose(sample_object_feature(F, box, 3, "max"), oracle, atol=1e-12)


@given(st.integers(0, 2**31), st.sampled_from(["max", "avg", "global_max", "global_mean"]))
def test_pooling_order_invariance(seed, pooling):
    rng = np.random.default_rng(seed)
    samples = rng.normal(size=(125, 6)) * 10 ** rng.uniform(-3, 3)
    perm = rng.permutation(125)
    a = pool_features(samples, pooling)
    b = pool_features(samples[perm], pooling)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=0)


@pytest.mark.parametrize("n", [3, 5])
def test_max_pool_monotone_on_superset_lattice(rng, n):
    # n=2 lattice is the box corners, a subset of every n >= 2 lattice
    F = _volume(rng, dims=(10, 10, 10), origin=(-1, -1, -1), C=4)
    for _ in range(10):
        box = OrientedBox3(Pose(rng.uniform(-0.2, 0.2, 3), rng.normal(size=4)), rng.uniform(0.3, 0.9, 3))
        coarse = box_sampling_grid(box, 2)
        fine = box_sampling_grid(box, n)
        for c in coarse:
            assert np.min(np.linalg.norm(fine - c, axis=1)) < 1e-12
        assert np.all(sample_object_feature(F, box, n, "max") >= sample_object_feature(F, box, 2, "max") - 1e-12)


def test_box_feature_pooler_transform(rng):
    F = _volume(rng, dims=(8, 8, 8), origin=(-0.8, -0.8, -0.8))
    boxes = [OrientedBox3(Pose(rng.uniform(-0.2, 0.2, 3)), [0.4, 0.4, 0.4]) for _ in range(3)]
    pooler = BoxFeaturePooler(n_per_axis=3, pooling="avg")
    rows = pooler.fit_transform([(F, b) for b in boxes])
    assert rows.shape == (3, F.channels)
    np.testing.assert_allclose(rows[1], sample_object_feature(F, boxes[1], 3, "avg"))
    with pytest.raises(ValueError):
        BoxFeaturePooler(pooling="median").fit()
