"""Two-stage folding decoder: deforms a 2D lattice into a 3D surface cloud
conditioned on an object feature vector, trained on chamfer distance.

Clouds are decoded in the normalized object frame, ``[-1, 1]^3`` after
dividing by the box half-extents; :meth:`FoldingDecoder.decode_box` maps
them back into the ego frame.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .geometry import OrientedBox3, inverse_transform_point, transform_point
from .losses import chamfer
from .nn import (
    TrainConfig,
    TrainingDivergedError,
    init_mlp,
    make_optimizer,
    mlp_backward,
    mlp_forward,
)
from .voxel import PointCloud

__all__ = [
    "make_grid2d",
    "FoldingDecoder",
    "fold_forward",
    "fold_gradients",
    "train_folding",
    "normalize_to_box",
    "denormalize_from_box",
]


def _lattice_shape(K):
    r = int(np.floor(np.sqrt(K)))
    for rows, cols in ((r, r), (r, r + 1), (r + 1, r + 1)):
        if rows * cols >= K:
            return rows, cols
    raise AssertionError("unreachable")


def make_grid2d(K: int = 2500):
    """Near-square lattice on ``[-1, 1]^2``, row-major, exactly ``K`` points.

    When ``K`` has no ``r x s`` factorization with ``|r - s| <= 1`` the
    smallest such lattice with at least ``K`` points is truncated.
    """
    K = int(K)
    if K < 1:
        raise ValueError("K must be >= 1")
    rows, cols = _lattice_shape(K)
    xs = np.linspace(-1.0, 1.0, cols) if cols > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, rows) if rows > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    g = np.stack([xx.ravel(), yy.ravel()], axis=1)
    return g[:K]


def normalize_to_box(points, box: OrientedBox3):
    """Ego-frame points to the box's normalized object frame."""
    return inverse_transform_point(box.pose, points) / (box.size / 2.0)


def denormalize_from_box(points, box: OrientedBox3):
    return transform_point(box.pose, np.asarray(points) * (box.size / 2.0))


class FoldingDecoder(RegressorMixin, BaseEstimator):
    """Folding point-cloud decoder with a scikit-learn interface.

    ``fit(X, y)`` takes object features ``X`` of shape ``(n, C)`` and a
    sequence of ground-truth clouds ``y`` (each ``(M_i, 3)``, normalized
    object frame). ``predict(X)`` returns an ``(n, K, 3)`` array.

    Parameters
    ----------
    hidden : int
        Width of both hidden layers in each folding stage.
    n_points : int
        Number of lattice points ``K`` used in training (and by default in
        ``predict``).
    learning_rate, epochs, batch_size, optimizer, beta1, beta2, eps, seed
        Optimisation settings; see :class:`adaocc.nn.TrainConfig`.
    """

    def __init__(
        self,
        hidden=64,
        n_points=2500,
        learning_rate=1e-3,
        epochs=200,
        batch_size=16,
        optimizer="adam",
        beta1=0.9,
        beta2=0.999,
        eps=1e-8,
        seed=0,
    ):
        self.hidden = hidden
        self.n_points = n_points
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.seed = seed

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            optimizer=self.optimizer,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )

    def initialize(self, n_features):
        """Draw fresh parameters for ``n_features``-channel object features."""
        rng = np.random.default_rng(self.seed)
        C, h = int(n_features), int(self.hidden)
        self.n_features_in_ = C
        self.stage1_ = init_mlp([C + 2, h, h, 3], rng)
        self.stage2_ = init_mlp([C + 3, h, h, 3], rng)
        self.loss_curve_ = []
        return self

    def parameters(self):
        """Flat list of parameter arrays, stage 1 then stage 2, (W, b) per layer."""
        return [a for layer in self.stage1_ + self.stage2_ for a in layer]

    def set_parameters(self, arrays):
        arrays = list(arrays)
        expected = self.parameters()
        if len(arrays) != len(expected):
            raise ValueError("parameter count mismatch")
        for dst, src in zip(expected, arrays):
            src = np.asarray(src, dtype=np.float64)
            if src.shape != dst.shape:
                raise ValueError(f"parameter shape mismatch: {src.shape} vs {dst.shape}")
            dst[...] = src
        return self

    # forward / backward on a batch of features sharing one lattice

    def _forward(self, C_batch, g):
        B, C = C_batch.shape
        K = g.shape[0]
        c_rep = np.repeat(C_batch, K, axis=0)
        x1 = np.concatenate([c_rep, np.tile(g, (B, 1))], axis=1)
        p1, acts1 = mlp_forward(self.stage1_, x1)
        x2 = np.concatenate([c_rep, p1], axis=1)
        p2, acts2 = mlp_forward(self.stage2_, x2)
        return p2.reshape(B, K, 3), (acts1, acts2)

    def _backward(self, cache, d_out, B, K):
        acts1, acts2 = cache
        C = self.n_features_in_
        g2, dx2 = mlp_backward(self.stage2_, acts2, d_out.reshape(B * K, 3))
        g1, dx1 = mlp_backward(self.stage1_, acts1, dx2[:, C:])
        dc = (dx1[:, :C] + dx2[:, :C]).reshape(B, K, C).sum(axis=1)
        return g1 + g2, dc

    def predict(self, X, n_points=None):
        check_is_fitted(self, "stage1_")
        X = check_array(X, ensure_2d=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} feature channels, got {X.shape[1]}")
        g = make_grid2d(self.n_points if n_points is None else n_points)
        out, _ = self._forward(X, g)
        return out

    def decode_box(self, c, box: OrientedBox3, n_points=None) -> PointCloud:
        """Decode one feature and pose the result into the ego frame of ``box``."""
        local = self.predict(np.asarray(c).reshape(1, -1), n_points)[0]
        return PointCloud(denormalize_from_box(local, box), box.class_id)

    def fit(self, X, y):
        for _ in self.fit_steps(X, y):
            pass
        return self

    def fit_steps(self, X, y, weight=1.0):
        """Generator form of :meth:`fit`: yields ``(epoch, batch_loss)`` per step.

        ``weight`` scales the gradient (joint training); the recorded loss
        curve is always the unweighted per-example mean chamfer.
        """
        X = check_array(X, ensure_2d=True)
        targets = [np.asarray(getattr(t, "points", t), dtype=np.float64) for t in y]
        if len(targets) != X.shape[0]:
            raise ValueError("X and y have different lengths")
        if not targets:
            raise ValueError("training set is empty")
        if any(t.ndim != 2 or t.shape[1] != 3 or len(t) == 0 for t in targets):
            raise ValueError("every target cloud must be a non-empty (M, 3) array")
        cfg = self.train_config
        self.initialize(X.shape[1])
        rng = np.random.default_rng(cfg.seed)
        opt = make_optimizer(cfg)
        g = make_grid2d(self.n_points)
        K = g.shape[0]
        n = X.shape[0]
        trees = [cKDTree(t) for t in targets]
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                B = len(batch)
                out, cache = self._forward(X[batch], g)
                if not np.all(np.isfinite(out)):
                    raise TrainingDivergedError(epoch, float("nan"))
                d_out = np.empty_like(out)
                batch_loss = 0.0
                for r, i in enumerate(batch):
                    try:
                        val, grad = chamfer(out[r], targets[i], tree_y=trees[i])
                    except ValueError:
                        raise TrainingDivergedError(epoch, float("nan")) from None
                    batch_loss += val
                    d_out[r] = grad * (weight / B)
                total += batch_loss
                grads, _ = self._backward(cache, d_out, B, K)
                opt.step(self.stage1_ + self.stage2_, grads)
                yield epoch, batch_loss
            mean = total / n
            if not np.isfinite(mean):
                raise TrainingDivergedError(epoch, mean)
            self.loss_curve_.append(mean)

    def score(self, X, y):
        """Negative mean chamfer distance (higher is better)."""
        pred = self.predict(X)
        vals = [chamfer(p, np.asarray(getattr(t, "points", t)), return_grad=False) for p, t in zip(pred, y)]
        return -float(np.mean(vals))


def fold_forward(dec: FoldingDecoder, c, g) -> PointCloud:
    """Decode one object feature over lattice ``g`` (normalized object frame)."""
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if c.shape[0] != dec.n_features_in_:
        raise ValueError(f"feature length {c.shape[0]} != decoder channels {dec.n_features_in_}")
    out, _ = dec._forward(c.reshape(1, -1), np.asarray(g, dtype=np.float64))
    return PointCloud(out[0])


def fold_gradients(dec: FoldingDecoder, c, g, gt):
    """Chamfer loss of one decoded cloud against ``gt`` with its gradients.

    Returns ``(loss, param_grads, grad_c)`` where ``param_grads`` lines up
    with :meth:`FoldingDecoder.parameters`.
    """
    gt = np.asarray(getattr(gt, "points", gt), dtype=np.float64)
    if gt.size == 0:
        raise ValueError("ground-truth cloud is empty")
    c = np.asarray(c, dtype=np.float64).reshape(1, -1)
    if c.shape[1] != dec.n_features_in_:
        raise ValueError(f"feature length {c.shape[1]} != decoder channels {dec.n_features_in_}")
    g = np.asarray(g, dtype=np.float64)
    out, cache = dec._forward(c, g)
    loss, d_pts = chamfer(out[0], gt)
    grads, dc = dec._backward(cache, d_pts[None], 1, g.shape[0])
    flat = [a for layer in grads for a in layer]
    return loss, flat, dc[0]


def train_folding(dataset, cfg: TrainConfig = TrainConfig(), hidden=64, n_points=2500):
    """Train a decoder on ``[(feature, gt_cloud), ...]``.

    Returns the fitted decoder and its per-epoch mean chamfer curve.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    X = np.stack([np.asarray(c, dtype=np.float64) for c, _ in dataset])
    y = [gt for _, gt in dataset]
    dec = FoldingDecoder(
        hidden=hidden,
        n_points=n_points,
        learning_rate=cfg.learning_rate,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        optimizer=cfg.optimizer,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        seed=cfg.seed,
    )
    dec.fit(X, y)
    return dec, list(dec.loss_curve_)
