"""Per-voxel semantic occupancy head: a pointwise MLP over (previous,
current) feature volumes, trained with focal loss."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .classes import CLASS_COUNT
from .features import FeatureVolume
from .losses import PROB_FLOOR, FocalConfig, focal_loss
from .nn import (
    TrainConfig,
    TrainingDivergedError,
    init_mlp,
    make_optimizer,
    mlp_backward,
    mlp_forward,
)
from .voxel import SemanticVoxelGrid

__all__ = [
    "OccHead",
    "softmax",
    "focal_logit_loss",
    "stack_voxel_features",
    "occ_forward",
    "occ_predict",
    "train_occ_head",
]


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def focal_logit_loss(logits, targets, focal: FocalConfig):
    """Summed focal loss over rows of ``logits`` and its gradient w.r.t. them."""
    p = softmax(logits)
    rows = np.arange(len(targets))
    p_true = np.maximum(p[rows, targets], PROB_FLOOR)
    loss, dp = focal_loss(p_true, focal)
    # d p_y / d z_j = p_y (onehot_j - p_j)
    onehot = np.zeros_like(p)
    onehot[rows, targets] = 1.0
    dz = (dp * p_true)[:, None] * (onehot - p)
    return loss, dz


def stack_voxel_features(F_prev: Optional[FeatureVolume], F_cur: FeatureVolume, dual_frame=True):
    """Per-voxel input rows in x-fastest voxel order, ``(n_voxels, D)``."""
    cur = F_cur.data.transpose(2, 1, 0, 3).reshape(-1, F_cur.channels)
    if not dual_frame:
        return cur
    if F_prev is None:
        raise ValueError("dual-frame head needs the previous feature volume")
    if not F_prev.spec.same_as(F_cur.spec) or F_prev.channels != F_cur.channels:
        raise ValueError("previous and current feature volumes have different specs")
    prev = F_prev.data.transpose(2, 1, 0, 3).reshape(-1, F_prev.channels)
    return np.concatenate([prev, cur], axis=1)


def _rows_to_volume(rows, spec):
    nx, ny, nz = spec.dims
    return rows.reshape(nz, ny, nx, -1).transpose(2, 1, 0, 3)


def _grid_targets(grid: SemanticVoxelGrid):
    return grid.flat_labels().astype(np.int64)


class OccHead(ClassifierMixin, BaseEstimator):
    """Pointwise voxel classifier: ``D -> hidden (tanh) -> n_classes`` logits.

    ``n_classes`` counts the free class, so a map with semantic classes
    ``1..C`` uses ``n_classes = C + 1``. ``fit`` takes voxel feature rows
    ``X`` of shape ``(n, D)`` and integer labels ``y``.
    """

    def __init__(
        self,
        hidden=64,
        n_classes=CLASS_COUNT + 1,
        dual_frame=True,
        alpha=0.25,
        beta=2.0,
        learning_rate=1e-2,
        epochs=50,
        batch_size=4096,
        optimizer="adam",
        beta1=0.9,
        beta2=0.999,
        eps=1e-8,
        seed=0,
    ):
        self.hidden = hidden
        self.n_classes = n_classes
        self.dual_frame = dual_frame
        self.alpha = alpha
        self.beta = beta
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

    @property
    def focal_config(self) -> FocalConfig:
        return FocalConfig(self.alpha, self.beta)

    def initialize(self, n_features):
        rng = np.random.default_rng(self.seed)
        self.n_features_in_ = int(n_features)
        self.classes_ = np.arange(int(self.n_classes))
        self.layers_ = init_mlp([self.n_features_in_, int(self.hidden), int(self.n_classes)], rng)
        self.loss_curve_ = []
        return self

    def parameters(self):
        return [a for layer in self.layers_ for a in layer]

    def decision_function(self, X):
        check_is_fitted(self, "layers_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        out, _ = mlp_forward(self.layers_, X)
        return out

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        # argmax returns the first maximum: ties go to the smaller class id
        return np.argmax(self.decision_function(X), axis=1)

    def loss_and_gradients(self, X, y):
        """Summed focal loss on ``(X, y)`` with parameter and logit gradients."""
        out, acts = mlp_forward(self.layers_, X)
        loss, dz = focal_logit_loss(out, y, self.focal_config)
        grads, _ = mlp_backward(self.layers_, acts, dz)
        return loss, [a for g in grads for a in g], dz

    def fit(self, X, y):
        for _ in self.fit_steps(X, y):
            pass
        return self

    def fit_steps(self, X, y, weight=1.0):
        """Generator form of :meth:`fit`: yields ``(epoch, batch_loss)`` per step.

        ``weight`` scales the gradient (joint training); the recorded loss
        curve is always the unweighted per-voxel mean.
        """
        X = check_array(X)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if len(y) != X.shape[0]:
            raise ValueError("X and y have different lengths")
        if len(y) == 0:
            raise ValueError("training set is empty")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes - 1}]")
        cfg = self.train_config
        focal = self.focal_config
        self.initialize(X.shape[1])
        rng = np.random.default_rng(cfg.seed)
        opt = make_optimizer(cfg)
        n = X.shape[0]
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                out, acts = mlp_forward(self.layers_, X[batch])
                if not np.all(np.isfinite(out)):
                    raise TrainingDivergedError(epoch, float("nan"))
                loss, dz = focal_logit_loss(out, y[batch], focal)
                total += loss
                grads, _ = mlp_backward(self.layers_, acts, dz * (weight / len(batch)))
                opt.step(self.layers_, grads)
                yield epoch, loss
            mean = total / n
            if not np.isfinite(mean):
                raise TrainingDivergedError(epoch, mean)
            self.loss_curve_.append(mean)

    def fit_volumes(self, dataset):
        """Fit on ``[(F_prev, F_cur, gt_grid), ...]``."""
        X, y = _dataset_rows(dataset, self.dual_frame)
        return self.fit(X, y)


def _dataset_rows(dataset, dual_frame):
    if not dataset:
        raise ValueError("dataset is empty")
    channels = dataset[0][1].channels
    Xs, ys = [], []
    for F_prev, F_cur, gt in dataset:
        if not gt.spec.same_as(F_cur.spec):
            raise ValueError("ground-truth grid and feature volume specs differ")
        if F_cur.channels != channels:
            raise ValueError("feature volumes disagree on channel count")
        Xs.append(stack_voxel_features(F_prev, F_cur, dual_frame))
        ys.append(_grid_targets(gt))
    return np.concatenate(Xs), np.concatenate(ys)


def occ_forward(head: OccHead, F_prev: Optional[FeatureVolume], F_cur: FeatureVolume) -> FeatureVolume:
    """Per-voxel class logits as a feature volume with ``n_classes`` channels."""
    rows = stack_voxel_features(F_prev, F_cur, head.dual_frame)
    logits = head.decision_function(rows)
    return FeatureVolume(F_cur.spec, _rows_to_volume(logits, F_cur.spec))


def occ_predict(logits: FeatureVolume) -> SemanticVoxelGrid:
    """Argmax readout; class 0 is free and ties go to the smaller id."""
    labels = np.argmax(logits.data, axis=3).astype(np.uint8)
    return SemanticVoxelGrid(logits.spec, labels, max(logits.channels - 1, 1))


def train_occ_head(dataset, cfg: TrainConfig = TrainConfig(learning_rate=1e-2, epochs=50, batch_size=4096),
                   focal: FocalConfig = FocalConfig(), n_classes=CLASS_COUNT + 1, hidden=64, dual_frame=True):
    """Train an :class:`OccHead` on ``[(F_prev, F_cur, gt_grid), ...]``.

    Returns the fitted head and its per-epoch mean per-voxel focal loss.
    """
    head = OccHead(
        hidden=hidden,
        n_classes=n_classes,
        dual_frame=dual_frame,
        alpha=focal.alpha,
        beta=focal.beta,
        learning_rate=cfg.learning_rate,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        optimizer=cfg.optimizer,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        seed=cfg.seed,
    )
    head.fit_volumes(dataset)
    return head, list(head.loss_curve_)
