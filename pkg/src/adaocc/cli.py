"""Command-line driver.

Subcommands: ``gen-scenes``, ``train``, ``infer``, ``eval`` and ``ablate``.
Exit codes: 0 success, 1 usage error, 2 data or model error. The worker
pool size is capped by the ``ADAOCC_THREADS`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import io as aio
from .folding import FoldingDecoder
from .geometry import GridSpec
from .metrics import evaluate
from .nn import TrainingDivergedError
from .occhead import OccHead
from .pipeline import (
    BOUNDS,
    STUDIES,
    PipelineConfig,
    StageError,
    boxcount_study,
    foldsize_study,
    infer_scene,
    pooling_study,
    prepare_scenes,
    train_fold,
    train_joint,
    train_occ,
    write_study,
)
from .scene import DetectorNoise, PlacementError, gen_scene, gt_object_clouds, rasterize_gt, surface_object_clouds
from .voxel import AdaptiveMap

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

MODEL_SUFFIX = {"occ": ".occh", "fold": ".fold"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path):
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return PipelineConfig.load(p)
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid config {path}: {e}") from e


def _voxel_tag(v):
    return f"{v:g}"


# gen-scenes ---------------------------------------------------------------


def cmd_gen_scenes(args):
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        seed = args.seed + i
        scene = gen_scene(seed, cfg.scene_config)
        name = f"scene_{i:04d}"
        d = out / name
        (d / "objects").mkdir(parents=True, exist_ok=True)
        (d / "surface").mkdir(exist_ok=True)
        aio.write_scene(d / "scene.json", scene)
        grids = {}
        for v in cfg.gt_voxels:
            fname = f"gt_{_voxel_tag(v)}.occgrid"
            aio.write_occgrid(d / fname, rasterize_gt(scene, GridSpec.from_bounds(scene.bounds, v)))
            grids[_voxel_tag(v)] = fname
        gt_objs = gt_object_clouds(scene, GridSpec.from_bounds(scene.bounds, cfg.eval_voxel))
        for j, (cloud, _) in enumerate(gt_objs):
            aio.write_ply(d / "objects" / f"obj_{j:03d}.ply", cloud)
        for j, (cloud, _) in enumerate(surface_object_clouds(scene, cfg.fold_k)):
            aio.write_ply(d / "surface" / f"obj_{j:03d}.ply", cloud)
        (d / "boxes.json").write_text(aio.boxes_json([o.box for o in scene.objects]))
        entries.append({"id": name, "seed": seed, "objects": len(scene.objects), "grids": grids})
    manifest = {"count": args.count, "seed": args.seed, "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.count} scene(s) to {out}")
    return EXIT_OK


# train --------------------------------------------------------------------


def _model_paths(out, task):
    out = Path(out)
    return out, out.with_name(out.stem + "_loss.csv")


def _save(task, model, out):
    path, csv_path = _model_paths(out, task)
    path.parent.mkdir(parents=True, exist_ok=True)
    if task == "occ":
        aio.write_occh(path, model)
        aio.write_loss_csv(csv_path, model.loss_curve_, "mean_focal")
    else:
        aio.write_fold(path, model)
        aio.write_loss_csv(csv_path, model.loss_curve_, "mean_chamfer")
    print(f"wrote {path} and {csv_path}")


def cmd_train(args):
    cfg = _load_config(args.config)
    data = prepare_scenes(cfg, cfg.train_seeds)
    if args.joint:
        head, dec = train_joint(cfg, data)
        models = {"occ": head, "fold": dec}
        _save(args.task, models[args.task], args.out)
        partner = "fold" if args.task == "occ" else "occ"
        out = Path(args.out)
        _save(partner, models[partner], out.with_name(f"{out.stem}_{partner}{MODEL_SUFFIX[partner]}"))
    elif args.task == "occ":
        _save("occ", train_occ(cfg, data), args.out)
    else:
        _save("fold", train_fold(cfg, data), args.out)
    return EXIT_OK


# infer --------------------------------------------------------------------


def _load_noise(spec):
    if spec in (None, "default"):
        return None
    if spec == "none":
        return DetectorNoise(0.0, 0.0, 0.0, 0.0, 0.0)
    p = Path(spec)
    if not p.is_file():
        raise UsageError(f"--noise must be 'default', 'none' or a JSON file, got {spec!r}")
    return DetectorNoise(**json.loads(p.read_text()))


def cmd_infer(args):
    cfg = _load_config(args.config)
    noise = _load_noise(args.noise)
    scene = aio.read_scene(args.scene)
    head = dec = None
    for m in args.models:
        model = aio.read_model(m)
        if isinstance(model, OccHead):
            head = model
        elif isinstance(model, FoldingDecoder):
            dec = model
    if head is None:
        raise aio.FormatError("no occupancy head (OCCH) among --models")
    if dec is None and not args.oracle_shapes:
        raise aio.FormatError("no folding decoder (FOLD) among --models")
    c_vox = head.n_features_in_ // (2 if head.dual_frame else 1)
    cfg = replace(cfg, c_vox=c_vox, dual_frame=head.dual_frame)
    res = infer_scene(scene, head, dec, cfg, noise, oracle_shapes=args.oracle_shapes)
    out = Path(args.out)
    (out / "objects").mkdir(parents=True, exist_ok=True)
    aio.write_occgrid(out / "coarse.occgrid", res.coarse)
    aio.write_occgrid(out / "fused.occgrid", res.fused)
    (out / "boxes.json").write_text(aio.boxes_json(res.boxes))
    for j, cloud in enumerate(res.objects):
        aio.write_ply(out / "objects" / f"obj_{j:03d}.ply", cloud)
    print(f"wrote coarse/fused grids, {len(res.boxes)} boxes and object clouds to {out}")
    return EXIT_OK


# eval ---------------------------------------------------------------------


def _read_objects(d: Path):
    """Object clouds and boxes stored side by side in a result directory."""
    boxes_file = d / "boxes.json"
    if not boxes_file.is_file():
        return [], []
    boxes = aio.boxes_from_json(boxes_file.read_text())
    clouds = [aio.read_ply(d / "objects" / f"obj_{j:03d}.ply") for j in range(len(boxes))]
    return clouds, boxes


def _load_pred(path):
    p = Path(path)
    if p.is_dir():
        coarse = aio.read_occgrid(p / "coarse.occgrid")
        clouds, boxes = _read_objects(p)
        if coarse.spec.voxel_size > 0.2 + 1e-9:
            return AdaptiveMap(coarse, clouds, boxes), None
        return coarse, boxes
    return aio.read_occgrid(p), None


def _load_gt(path, eval_voxel):
    p = Path(path)
    if p.is_dir():
        grid = aio.read_occgrid(p / f"gt_{_voxel_tag(eval_voxel)}.occgrid")
        clouds, boxes = _read_objects(p)
        return grid, list(zip(clouds, boxes))
    return aio.read_occgrid(p), []


def cmd_eval(args):
    pred, pred_boxes = _load_pred(args.pred)
    gt, gt_objs = _load_gt(args.gt, args.eval_voxel)
    report = evaluate(pred, gt, gt_objs, BOUNDS[args.bounds], args.eval_voxel, pred_boxes=pred_boxes)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    print(report.to_table())
    return EXIT_OK


# ablate -------------------------------------------------------------------


def cmd_ablate(args):
    cfg = _load_config(args.config)
    train = prepare_scenes(cfg, cfg.train_seeds)
    test = prepare_scenes(cfg, cfg.eval_seeds)
    if args.study == "pooling":
        rows = pooling_study(cfg, train, test)
    elif args.study == "foldsize":
        rows = foldsize_study(cfg, train_fold(cfg, train), test)
    else:
        rows = boxcount_study(cfg, train_occ(cfg, train), train_fold(cfg, train), test)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    png = write_study(rows, out, title=f"{args.study} ablation")
    print(f"wrote {out} and {png}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="adaocc", description="Adaptive-resolution occupancy toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scenes", help="generate synthetic scenes with ground truth")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_scenes)

    t = sub.add_parser("train", help="train the occupancy head or the folding decoder")
    t.add_argument("--task", choices=("occ", "fold"), required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--joint", action="store_true", help="alternate steps with the other task")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run the full pipeline on one scene")
    i.add_argument("--scene", required=True)
    i.add_argument("--models", nargs="+", required=True)
    i.add_argument("--noise", default="default", help="'default', 'none' or a JSON file")
    i.add_argument("--out", required=True)
    i.add_argument("--config")
    i.add_argument("--oracle-shapes", action="store_true", help="use ground-truth object clouds")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score a prediction against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--bounds", choices=sorted(BOUNDS), default="close")
    e.add_argument("--eval-voxel", type=float, default=0.2)
    e.add_argument("--out", help="write the JSON report here instead of stdout")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation study")
    a.add_argument("--study", choices=STUDIES, required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"adaocc: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (StageError, aio.FormatError, TrainingDivergedError, PlacementError, ValueError, OSError) as e:
        print(f"adaocc: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
