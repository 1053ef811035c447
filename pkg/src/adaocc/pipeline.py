"""End-to-end driver: scene data, training, inference, the fusion experiment
and the ablation studies. The CLI is a thin layer over these functions."""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .classes import CLASS_COUNT, OBJECT_CLASS_IDS
from .features import FeatureVolume, sample_object_feature
from .folding import FoldingDecoder, denormalize_from_box, normalize_to_box
from .geometry import CLOSE_RANGE, FULL_RANGE, GridSpec, OrientedBox3, Pose, SceneBounds
from .losses import FocalConfig, JointLossWeights, chamfer
from .metrics import MetricsReport, evaluate
from .nn import TrainConfig
from .occhead import OccHead, _dataset_rows, occ_forward, occ_predict
from .scene import (
    DetectorNoise,
    SceneConfig,
    SceneSpec,
    VisibilityConfig,
    encode_features,
    gen_scene,
    gt_object_clouds,
    oracle_detect,
    rasterize_gt,
    surface_object_clouds,
)
from .voxel import AdaptiveMap, PointCloud, SemanticVoxelGrid, fuse, resample_factor

__all__ = [
    "PipelineConfig",
    "StageError",
    "BOUNDS",
    "worker_count",
    "parallel_map",
    "SceneData",
    "prepare_scene",
    "prepare_scenes",
    "occ_training_rows",
    "fold_training_set",
    "train_occ",
    "train_fold",
    "train_joint",
    "InferenceResult",
    "infer_scene",
    "evaluate_scene",
    "fusion_experiment",
    "pooling_study",
    "foldsize_study",
    "boxcount_study",
    "STUDIES",
    "study_csv",
    "write_study",
    "density_chamfer",
    "robustness_study",
]

BOUNDS = {"close": CLOSE_RANGE, "full": FULL_RANGE}
POOLING_LEVELS = ("max", "avg", "global_max", "global_mean")
FOLDSIZE_LEVELS = (900, 2500, 10000, 40000)
BOXCOUNT_LEVELS = (0, 10, 20, 30, 40)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def _train_config(d):
    return d if isinstance(d, TrainConfig) else TrainConfig(**d)


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the pipeline; serialized as JSON.

    Unknown keys are rejected so typos in config files fail loudly.
    """

    bounds: str = "close"
    n_objects: int = 12
    n_walls: int = 0
    train_voxel: float = 0.8
    eval_voxel: float = 0.2
    gt_voxels: tuple = (0.2, 0.4, 0.8)
    c_vox: int = 32
    visibility: str = "front_facing"
    n_per_axis: int = 5
    pooling: str = "max"
    interp: str = "tricubic"
    fold_k: int = 2500
    fold_hidden: int = 64
    occ_hidden: int = 64
    dual_frame: bool = True
    noise: DetectorNoise = DetectorNoise()
    focal: FocalConfig = FocalConfig()
    loss_weights: JointLossWeights = JointLossWeights()
    occ_train: TrainConfig = TrainConfig(learning_rate=1e-2, epochs=50, batch_size=4096)
    fold_train: TrainConfig = TrainConfig(learning_rate=3e-3, epochs=30, batch_size=4)
    train_seeds: tuple = tuple(range(1000, 1010))
    eval_seeds: tuple = tuple(range(20))
    #: 1-sigma translation noise (m) of the boxes in the pooling study
    ablation_translation: float = 0.2
    ablation_boxes: int = 100
    ablation_seed: int = 0

    def __post_init__(self):
        if self.bounds not in BOUNDS:
            raise ValueError(f"bounds must be one of {sorted(BOUNDS)}")
        if self.eval_voxel > self.train_voxel + 1e-12:
            raise ValueError("eval_voxel must not exceed train_voxel")
        resample_factor(self.train_voxel, self.eval_voxel)
        for v in self.gt_voxels:
            resample_factor(min(self.gt_voxels), v)
        if self.pooling not in POOLING_LEVELS:
            raise ValueError(f"pooling must be one of {POOLING_LEVELS}")
        if self.n_objects < 0 or self.n_walls < 0:
            raise ValueError("object and wall counts must be non-negative")
        object.__setattr__(self, "gt_voxels", tuple(float(v) for v in self.gt_voxels))
        object.__setattr__(self, "train_seeds", tuple(int(s) for s in self.train_seeds))
        object.__setattr__(self, "eval_seeds", tuple(int(s) for s in self.eval_seeds))

    # derived objects

    @property
    def scene_bounds(self) -> SceneBounds:
        return BOUNDS[self.bounds]

    @property
    def scene_config(self) -> SceneConfig:
        return SceneConfig(bounds=self.scene_bounds, n_objects=self.n_objects, n_walls=self.n_walls)

    @property
    def vis(self) -> VisibilityConfig:
        return VisibilityConfig(mode=self.visibility)

    def spec(self, voxel_size: float) -> GridSpec:
        return GridSpec.from_bounds(self.scene_bounds, voxel_size)

    # (de)serialization

    def to_dict(self):
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            elif isinstance(v, (FocalConfig, JointLossWeights, TrainConfig)):
                v = asdict(v)
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "noise" in kw:
            kw["noise"] = DetectorNoise(**kw["noise"])
        if "focal" in kw:
            kw["focal"] = FocalConfig(**kw["focal"])
        if "loss_weights" in kw:
            kw["loss_weights"] = JointLossWeights(**kw["loss_weights"])
        for key in ("occ_train", "fold_train"):
            if key in kw:
                base = asdict(getattr(cls, key))
                base.update(kw[key])
                kw[key] = _train_config(base)
        for key in ("gt_voxels", "train_seeds", "eval_seeds"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


# --------------------------------------------------------------------------
# worker pool


def worker_count(n_items: Optional[int] = None) -> int:
    """Worker processes to use: CPU count capped by ``ADAOCC_THREADS``."""
    n = os.cpu_count() or 1
    cap = os.environ.get("ADAOCC_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"ADAOCC_THREADS must be a positive integer, got {cap!r}") from None
    if n_items is not None:
        n = min(n, max(1, n_items))
    return n


def parallel_map(fn, items, workers: Optional[int] = None):
    """Ordered map over ``items``, in a process pool when more than one
    worker is allowed. Results come back in input order."""
    items = list(items)
    workers = worker_count(len(items)) if workers is None else workers
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# scene data


@dataclass
class SceneData:
    scene: SceneSpec
    F_prev: FeatureVolume
    F_cur: FeatureVolume
    gt_train: SemanticVoxelGrid


def prepare_scene(cfg: PipelineConfig, seed: int) -> SceneData:
    scene = gen_scene(int(seed), cfg.scene_config)
    spec = cfg.spec(cfg.train_voxel)
    F_prev, F_cur = encode_features(scene, cfg.vis, spec, cfg.c_vox, temporal=True, seed=int(seed))
    return SceneData(scene, F_prev, F_cur, rasterize_gt(scene, spec))


def _prepare(args):
    return prepare_scene(*args)


def prepare_scenes(cfg: PipelineConfig, seeds: Sequence[int]):
    return parallel_map(_prepare, [(cfg, s) for s in seeds])


def occ_training_rows(cfg: PipelineConfig, data: Sequence[SceneData]):
    return _dataset_rows([(d.F_prev, d.F_cur, d.gt_train) for d in data], cfg.dual_frame)


def fold_training_set(cfg: PipelineConfig, data: Sequence[SceneData], pooling: Optional[str] = None):
    """Object features pooled in the ground-truth boxes and the matching
    surface clouds in the normalized object frame."""
    pooling = cfg.pooling if pooling is None else pooling
    X, Y = [], []
    for d in data:
        for cloud, box in surface_object_clouds(d.scene, cfg.fold_k):
            X.append(sample_object_feature(d.F_cur, box, cfg.n_per_axis, pooling, cfg.interp))
            Y.append(normalize_to_box(cloud.points, box))
    if not X:
        raise ValueError("training scenes contain no objects")
    return np.asarray(X), Y


def _make_head(cfg: PipelineConfig) -> OccHead:
    t = cfg.occ_train
    return OccHead(
        hidden=cfg.occ_hidden,
        n_classes=CLASS_COUNT + 1,
        dual_frame=cfg.dual_frame,
        alpha=cfg.focal.alpha,
        beta=cfg.focal.beta,
        learning_rate=t.learning_rate,
        epochs=t.epochs,
        batch_size=t.batch_size,
        optimizer=t.optimizer,
        beta1=t.beta1,
        beta2=t.beta2,
        eps=t.eps,
        seed=t.seed,
    )


def _make_decoder(cfg: PipelineConfig, n_points: Optional[int] = None) -> FoldingDecoder:
    t = cfg.fold_train
    return FoldingDecoder(
        hidden=cfg.fold_hidden,
        n_points=cfg.fold_k if n_points is None else n_points,
        learning_rate=t.learning_rate,
        epochs=t.epochs,
        batch_size=t.batch_size,
        optimizer=t.optimizer,
        beta1=t.beta1,
        beta2=t.beta2,
        eps=t.eps,
        seed=t.seed,
    )


def train_occ(cfg: PipelineConfig, data: Sequence[SceneData]) -> OccHead:
    X, y = occ_training_rows(cfg, data)
    return _make_head(cfg).fit(X, y)


def train_fold(cfg: PipelineConfig, data: Sequence[SceneData], pooling: Optional[str] = None) -> FoldingDecoder:
    X, Y = fold_training_set(cfg, data, pooling)
    return _make_decoder(cfg).fit(X, Y)


def train_joint(cfg: PipelineConfig, data: Sequence[SceneData]):
    """Alternate optimisation steps between the occupancy head and the
    folding decoder on the same feature volumes.

    Each task's gradient is scaled by its joint-loss weight. The two tasks
    keep separate parameters and random streams, so a task whose partner
    has weight zero follows exactly its single-task trajectory.
    """
    Xo, yo = occ_training_rows(cfg, data)
    Xf, Yf = fold_training_set(cfg, data)
    head, dec = _make_head(cfg), _make_decoder(cfg)
    w = cfg.loss_weights
    streams = [head.fit_steps(Xo, yo, w.w_sem), dec.fit_steps(Xf, Yf, w.w_surf)]
    while streams:
        for s in list(streams):
            try:
                next(s)
            except StopIteration:
                streams.remove(s)
    return head, dec


# --------------------------------------------------------------------------
# inference and evaluation


@dataclass
class InferenceResult:
    coarse: SemanticVoxelGrid
    boxes: list
    objects: list
    fused: SemanticVoxelGrid

    @property
    def adaptive(self) -> AdaptiveMap:
        return AdaptiveMap(self.coarse, self.objects, self.boxes)


def _nearest_object(scene: SceneSpec, box: OrientedBox3) -> int:
    centers = np.array([o.box.center for o in scene.objects])
    return int(np.argmin(np.linalg.norm(centers - box.center, axis=1)))


def infer_scene(
    scene: SceneSpec,
    head: OccHead,
    dec: Optional[FoldingDecoder],
    cfg: PipelineConfig,
    noise: Optional[DetectorNoise] = None,
    oracle_shapes: bool = False,
    data: Optional[SceneData] = None,
    max_boxes: Optional[int] = None,
) -> InferenceResult:
    """encode -> occupancy head -> oracle detector -> box pooling -> folding -> fuse.

    With ``oracle_shapes`` the decoder is bypassed: each detection carries
    the ground-truth object cloud of the nearest object, posed in the
    detected box. ``max_boxes`` keeps the highest-scoring detections
    (nearest to the ego first among equal scores).
    """
    noise = cfg.noise if noise is None else noise
    try:
        if data is None:
            spec = GridSpec.from_bounds(scene.bounds, cfg.train_voxel)
            F_prev, F_cur = encode_features(scene, cfg.vis, spec, cfg.c_vox, temporal=True, seed=scene.seed)
        else:
            F_prev, F_cur = data.F_prev, data.F_cur
    except Exception as e:
        raise StageError("encode", e) from e
    try:
        coarse = occ_predict(occ_forward(head, F_prev, F_cur))
    except Exception as e:
        raise StageError("occupancy", e) from e
    try:
        boxes = oracle_detect(scene, noise)
        if max_boxes is not None:
            order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, float(np.linalg.norm(boxes[i].center))))
            boxes = [boxes[i] for i in sorted(order[: int(max_boxes)])]
    except Exception as e:
        raise StageError("detect", e) from e
    objects, kept = [], []
    try:
        shapes = gt_object_clouds(scene, GridSpec.from_bounds(scene.bounds, cfg.eval_voxel)) if oracle_shapes else None
        for box in boxes:
            if oracle_shapes:
                cloud, gt_box = shapes[_nearest_object(scene, box)]
                pts = denormalize_from_box(normalize_to_box(cloud.points, gt_box), box)
                objects.append(PointCloud(pts, box.class_id))
            else:
                try:
                    c = sample_object_feature(F_cur, box, cfg.n_per_axis, cfg.pooling, cfg.interp)
                except ValueError:
                    continue  # box entirely outside the feature volume
                objects.append(dec.decode_box(c, box))
            kept.append(box)
    except Exception as e:
        raise StageError("reconstruct", e) from e
    try:
        fused = fuse(coarse, objects, cfg.eval_voxel)
    except Exception as e:
        raise StageError("fuse", e) from e
    return InferenceResult(coarse, kept, objects, fused)


def evaluate_scene(result: InferenceResult, scene: SceneSpec, cfg: PipelineConfig, bounds: Optional[SceneBounds] = None):
    """Coarse-only and adaptive reports for one inference result."""
    bounds = scene.bounds if bounds is None else bounds
    spec = GridSpec.from_bounds(scene.bounds, cfg.eval_voxel)
    gt = rasterize_gt(scene, spec)
    gt_objs = gt_object_clouds(scene, spec)
    base = evaluate(result.coarse, gt, gt_objs, bounds, cfg.eval_voxel, pred_boxes=result.boxes)
    ada = evaluate(result.adaptive, gt, gt_objs, bounds, cfg.eval_voxel)
    return base, ada


def _fusion_row(args):
    cfg, head, dec, seed = args
    scene = gen_scene(int(seed), cfg.scene_config)
    noise = replace(cfg.noise, seed=int(seed))
    res = infer_scene(scene, head, dec, cfg, noise)
    base, ada = evaluate_scene(res, scene, cfg, CLOSE_RANGE)
    return {
        "seed": int(seed),
        "iou_coarse": base.iou,
        "iou_fused": ada.iou,
        "miou_coarse": base.miou,
        "miou_fused": ada.miou,
        "hausdorff_coarse": base.hausdorff_mean,
        "hausdorff_fused": ada.hausdorff_mean,
        "matched_coarse": base.counts["matched"],
        "matched_fused": ada.counts["matched"],
    }


def fusion_experiment(cfg: PipelineConfig, head: OccHead, dec: FoldingDecoder, seeds: Optional[Sequence[int]] = None):
    """Close-range coarse-only vs fused scores per scene.

    The detector noise seed follows the scene seed so each scene sees an
    independent draw.
    """
    seeds = cfg.eval_seeds if seeds is None else seeds
    return parallel_map(_fusion_row, [(cfg, head, dec, s) for s in seeds])


# --------------------------------------------------------------------------
# ablations


def density_chamfer(pred, gt) -> float:
    """Chamfer distance divided by the total point count: the mean squared
    nearest-neighbour distance, comparable across cloud sizes."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    return chamfer(pred, gt, return_grad=False) / (len(pred) + len(gt))


def _test_objects(cfg: PipelineConfig, data: Sequence[SceneData], n: int):
    objs = [(d, i) for d in data for i in range(len(d.scene.objects))]
    if not objs:
        raise ValueError("test scenes contain no objects")
    return [objs[j % len(objs)] for j in range(n)]


def _target(d: SceneData, i: int, n_points: int, seed: int):
    obj = d.scene.objects[i]
    cloud, box = surface_object_clouds(SceneSpec(d.scene.seed, d.scene.bounds, (obj,), d.scene.ground_z, ()), n_points, seed)[0]
    return normalize_to_box(cloud.points, box)


def pooling_study(cfg: PipelineConfig, train: Sequence[SceneData], test: Sequence[SceneData], levels=POOLING_LEVELS):
    """Test chamfer of decoders trained on each pooling mode, evaluated on
    boxes whose centers carry Gaussian translation noise.

    Chamfer is measured in the normalized frame of the true box so only the
    feature pathway is affected by the noise.
    """
    items = _test_objects(cfg, test, cfg.ablation_boxes)
    rng = np.random.default_rng(cfg.ablation_seed)
    shifts = rng.normal(scale=cfg.ablation_translation, size=(len(items), 3))
    targets = [_target(d, i, cfg.fold_k, 1 + j) for j, (d, i) in enumerate(items)]
    rows = []
    for pooling in levels:
        dec = train_fold(cfg, train, pooling)
        vals = []
        for (d, i), dt, tgt in zip(items, shifts, targets):
            box = d.scene.objects[i].box
            noisy = box.replace(pose=Pose(box.center + dt, box.pose.rotation))
            c = sample_object_feature(d.F_cur, noisy, cfg.n_per_axis, pooling, cfg.interp)
            vals.append(density_chamfer(dec.predict(c.reshape(1, -1))[0], tgt))
        rows.append(_row(pooling, "density_chamfer", vals))
    return rows


def robustness_study(cfg: PipelineConfig, test: Sequence[SceneData], levels=("max", "avg")):
    """Mean L2 change of the pooled object feature when the box center
    carries the same Gaussian translation noise as the pooling study."""
    items = _test_objects(cfg, test, cfg.ablation_boxes)
    rng = np.random.default_rng(cfg.ablation_seed)
    shifts = rng.normal(scale=cfg.ablation_translation, size=(len(items), 3))
    rows = []
    for pooling in levels:
        vals = []
        for (d, i), dt in zip(items, shifts):
            box = d.scene.objects[i].box
            noisy = box.replace(pose=Pose(box.center + dt, box.pose.rotation))
            c0 = sample_object_feature(d.F_cur, box, cfg.n_per_axis, pooling, cfg.interp)
            c1 = sample_object_feature(d.F_cur, noisy, cfg.n_per_axis, pooling, cfg.interp)
            vals.append(float(np.linalg.norm(c1 - c0)))
        rows.append(_row(pooling, "feature_change", vals))
    return rows


def foldsize_study(cfg: PipelineConfig, dec: FoldingDecoder, test: Sequence[SceneData], levels=FOLDSIZE_LEVELS, n_objects: int = 20):
    """Density-normalized chamfer of one decoder evaluated at several
    lattice sizes, each against a ground-truth cloud of the same size."""
    items = _test_objects(cfg, test, n_objects)
    feats = [
        sample_object_feature(d.F_cur, d.scene.objects[i].box, cfg.n_per_axis, cfg.pooling, cfg.interp)
        for d, i in items
    ]
    rows = []
    for K in levels:
        vals = []
        for j, ((d, i), c) in enumerate(zip(items, feats)):
            tgt = _target(d, i, K, 1 + j)
            vals.append(density_chamfer(dec.predict(c.reshape(1, -1), n_points=K)[0], tgt))
        rows.append(_row(K, "density_chamfer", vals))
    return rows


def boxcount_study(cfg: PipelineConfig, head: OccHead, dec: FoldingDecoder, test: Sequence[SceneData], levels=BOXCOUNT_LEVELS):
    """Close-range fused IOU when only the top-``n`` detections are folded."""
    rows = []
    for n in levels:
        vals = []
        for d in test:
            noise = replace(cfg.noise, seed=d.scene.seed)
            res = infer_scene(d.scene, head, dec, cfg, noise, data=d, max_boxes=n)
            _, ada = evaluate_scene(res, d.scene, cfg, CLOSE_RANGE)
            vals.append(ada.iou)
        rows.append(_row(n, "iou", vals))
    return rows


def _row(level, metric, vals):
    vals = np.asarray(vals, dtype=np.float64)
    return {"level": level, "metric": metric, "mean": float(vals.mean()), "std": float(vals.std()), "n": int(len(vals))}


STUDIES = ("pooling", "foldsize", "boxcount")


def study_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "metric", "mean", "std", "n"])
    for r in rows:
        w.writerow([r["level"], r["metric"], repr(r["mean"]), repr(r["std"]), r["n"]])
    return buf.getvalue()


def write_study(rows, csv_path, title=""):
    """Write the study CSV and a bar chart next to it (same stem, ``.png``)."""
    csv_path = Path(csv_path)
    csv_path.write_text(study_csv(rows))
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels = [str(r["level"]) for r in rows]
    ax.bar(labels, [r["mean"] for r in rows], yerr=[r["std"] for r in rows], color="0.6", capsize=3)
    ax.set_ylabel(rows[0]["metric"] if rows else "")
    ax.set_title(title)
    fig.tight_layout()
    png = csv_path.with_suffix(".png")
    fig.savefig(png, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return png
