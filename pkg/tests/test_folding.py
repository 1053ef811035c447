import numpy as np
import pytest

from adaocc.folding import (
    FoldingDecoder,
    denormalize_from_box,
    fold_forward,
    fold_gradients,
    make_grid2d,
    normalize_to_box,
    train_folding,
)
from adaocc.geometry import OrientedBox3, Pose
from adaocc.nn import TrainConfig, TrainingDivergedError

from gradcheck import RTOL, numeric_grad, rel_error


def _decoder(C=4, h=5, seed=0):
    return FoldingDecoder(hidden=h, n_points=9, seed=seed).initialize(C)


# make_grid2d ---------------------------------------------------------------------


@pytest.mark.parametrize("K,shape", [(2500, (50, 50)), (900, (30, 30)), (10000, (100, 100)), (40000, (200, 200))])
def test_grid_sizes(K, shape):
    g = make_grid2d(K)
    assert g.shape == (K, 2)
    assert len(np.unique(g[:, 0])) == shape[1] and len(np.unique(g[:, 1])) == shape[0]
    assert g.min() == -1.0 and g.max() == 1.0


def test_grid_single_point():
    np.testing.assert_array_equal(make_grid2d(1), [[0.0, 0.0]])


def test_grid_near_square_and_truncated():
    g = make_grid2d(12)  # 3 x 4
    assert len(np.unique(g[:, 1])) == 3 and len(np.unique(g[:, 0])) == 4
    g = make_grid2d(7)  # 3 x 3 truncated
    assert g.shape == (7, 2)
    np.testing.assert_array_equal(g, make_grid2d(9)[:7])


def test_grid_row_major():
    g = make_grid2d(4)
    np.testing.assert_array_equal(g, [[-1, -1], [1, -1], [-1, 1], [1, 1]])


def test_grid_rejects_zero():
    with pytest.raises(ValueError):
        make_grid2d(0)


# forward ----------------------------------------------------------------------------


def test_zero_parameters_give_output_bias():
    dec = _decoder()
    dec.set_parameters([np.zeros_like(p) for p in dec.parameters()])
    dec.stage2_[-1][1][:] = [0.3, -0.2, 0.1]
    out = fold_forward(dec, np.ones(4), make_grid2d(25)).points
    np.testing.assert_array_equal(out, np.tile([0.3, -0.2, 0.1], (25, 1)))


@pytest.mark.parametrize("K", [900, 2500, 10000, 40000])
def test_output_count_follows_lattice(K, rng):
    dec = FoldingDecoder(hidden=8, n_points=2500).initialize(4)
    out = dec.predict(rng.normal(size=(1, 4)), n_points=K)
    assert out.shape == (1, K, 3) and np.all(np.isfinite(out))


def test_forward_deterministic(rng):
    c = rng.normal(size=4)
    a = fold_forward(_decoder(seed=3), c, make_grid2d(16)).points
    b = fold_forward(_decoder(seed=3), c, make_grid2d(16)).points
    assert a.tobytes() == b.tobytes()


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        fold_forward(_decoder(), np.zeros(5), make_grid2d(4))
    with pytest.raises(ValueError):
        _decoder().predict(np.zeros((1, 3)))


def test_forward_matches_explicit_per_point_mlp(rng):
    dec = _decoder()
    c = rng.normal(size=4)
    g = make_grid2d(9)

    def mlp(layers, x):
        for i, (W, b) in enumerate(layers):
            x = x @ W + b
            if i < len(layers) - 1:
                x = np.tanh(x)
        return x

    want = np.array([mlp(dec.stage2_, np.concatenate([c, mlp(dec.stage1_, np.concatenate([c, gi]))])) for gi in g])
    np.testing.assert_allclose(fold_forward(dec, c, g).points, want, atol=1e-13)


# gradients -------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_parameter_and_feature_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    dec = _decoder(seed=seed)
    c = rng.normal(size=4)
    g = make_grid2d(9)
    gt = rng.normal(size=(7, 3))
    _, grads, dc = fold_gradients(dec, c, g, gt)

    def loss():
        return fold_gradients(dec, c, g, gt)[0]

    for p, a in zip(dec.parameters(), grads):
        assert rel_error(a, numeric_grad(loss, p)) < RTOL
    assert rel_error(dc, numeric_grad(loss, c)) < RTOL


def test_perfect_reconstruction_has_zero_gradient(rng):
    dec = _decoder()
    c = rng.normal(size=4)
    g = make_grid2d(9)
    gt = fold_forward(dec, c, g).points.copy()
    loss, grads, dc = fold_gradients(dec, c, g, gt)
    assert loss == 0.0
    assert max(np.abs(a).max() for a in grads) <= 1e-12
    assert np.abs(dc).max() <= 1e-12


def test_empty_gt_rejected():
    with pytest.raises(ValueError):
        fold_gradients(_decoder(), np.zeros(4), make_grid2d(4), np.zeros((0, 3)))


# training -----------------------------------------------------------------------------


def _single_shape(rng):
    t = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    return np.stack([np.cos(t), np.sin(t), 0.3 * np.sin(2 * t)], axis=1)


def test_memorizes_single_shape(rng):
    gt = _single_shape(rng)
    c = rng.normal(size=4)
    cfg = TrainConfig(learning_rate=1e-2, epochs=400, batch_size=1, seed=0)
    dec, curve = train_folding([(c, gt)], cfg, hidden=32, n_points=64)
    assert curve[-1] < 0.01 * curve[0]


def test_zero_learning_rate_keeps_parameters(rng):
    gt = _single_shape(rng)
    c = rng.normal(size=4)
    cfg = TrainConfig(learning_rate=0.0, epochs=5, batch_size=1, seed=2)
    dec, curve = train_folding([(c, gt)], cfg, hidden=8, n_points=16)
    fresh = FoldingDecoder(hidden=8, n_points=16, seed=2).initialize(4)
    for a, b in zip(dec.parameters(), fresh.parameters()):
        np.testing.assert_array_equal(a, b)
    assert len(set(curve)) == 1


def test_training_is_deterministic(rng):
    data = [(rng.normal(size=4), rng.normal(size=(20, 3))) for _ in range(5)]
    cfg = TrainConfig(learning_rate=1e-2, epochs=5, batch_size=2, seed=7)
    _, a = train_folding(data, cfg, hidden=8, n_points=16)
    _, b = train_folding(data, cfg, hidden=8, n_points=16)
    assert a == b


def test_divergence_reports_epoch(rng):
    gt = _single_shape(rng) * 1e3
    cfg = TrainConfig(learning_rate=1e6, epochs=50, batch_size=1, optimizer="sgd")
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError) as err:
        train_folding([(rng.normal(size=4), gt)], cfg, hidden=8, n_points=16)
    assert err.value.epoch >= 0


def test_fit_rejects_bad_targets(rng):
    dec = FoldingDecoder(hidden=4, n_points=4, epochs=1)
    with pytest.raises(ValueError):
        dec.fit(rng.normal(size=(2, 3)), [np.zeros((3, 3))])
    with pytest.raises(ValueError):
        dec.fit(rng.normal(size=(1, 3)), [np.zeros((0, 3))])


def test_sklearn_params_roundtrip():
    dec = FoldingDecoder(hidden=12, n_points=100)
    assert dec.get_params()["hidden"] == 12
    assert dec.set_params(epochs=3).epochs == 3


def test_weighted_fit_steps_scale_gradient(rng):
    # Adam is scale-invariant up to eps, so check with plain SGD
    X = rng.normal(size=(3, 4))
    y = [rng.normal(size=(10, 3)) for _ in range(3)]
    kw = dict(hidden=6, n_points=9, epochs=1, batch_size=3, optimizer="sgd", learning_rate=1e-2)
    a = FoldingDecoder(**kw)
    list(a.fit_steps(X, y, weight=0.5))
    b = FoldingDecoder(**dict(kw, learning_rate=5e-3))
    b.fit(X, y)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_allclose(p, q, rtol=1e-12, atol=1e-15)


# frames ---------------------------------------------------------------------------------


def test_normalized_frame_roundtrip(rng):
    box = OrientedBox3(Pose(rng.normal(size=3), rng.normal(size=4)), [4.0, 2.0, 1.5])
    pts = rng.normal(size=(30, 3))
    np.testing.assert_allclose(denormalize_from_box(normalize_to_box(pts, box), box), pts, atol=1e-12)
    corner = denormalize_from_box(np.array([[1.0, 1.0, 1.0]]), box)
    np.testing.assert_allclose(normalize_to_box(corner, box), [[1, 1, 1]], atol=1e-12)


def test_decode_box_carries_class(rng):
    dec = _decoder()
    box = OrientedBox3(Pose([5, 0, 0]), [2, 2, 2], class_id=3)
    cloud = dec.decode_box(rng.normal(size=4), box)
    assert cloud.class_id == 3 and len(cloud) == 9
