"""Command-line entry point: ``segfield <subcommand> ...``.

Dataset directory layout written by ``genscene`` and read by the other
subcommands::

    scene.json
    train/poses.json, train/rgb_000.png, train/mask_000.png, ...
    eval/ (same layout, spiral rig)
    points.ply      oracle surface points with part labels
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import tomli
from scipy.spatial import cKDTree

from . import autodiff as ad
from .camera import load_poses, save_poses
from .encoder import init_encoder
from .field import ConditioningSet, FieldConfig, field_eval_batch, init_field
from .fileio import (label_colors, read_mask_png, read_ply, read_rgb_png, write_mask_png, write_ply,
                     write_raw_volume, write_rgb_png)
from .metrics import METRICS_SCHEMA, chamfer_fscore, psnr, seg_report
from .recon import (GRID_BOUND, GRID_RESOLUTION, ISO_THRESHOLD, SemanticMesh, extract_grid, label_mesh,
                    marching_cubes, sample_mesh_surface, segment_points)
from .render import render_view
from .scene import (TEMPLATES, ObjectViews, RenderedView, SceneSpec, camera_rig, default_intrinsics,
                    make_object, render_object, sample_surface_points)
from .train import TrainConfig, conditioning, load_state, save_state, train

log = logging.getLogger("segfield")

GRANULARITY = "per_object_then_mean"


class CliError(Exception):
    pass


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"no such file or directory: {p}")
    return p


# ---------------------------------------------------------------- dataset directories

def write_views(out: Path, obj: ObjectViews) -> None:
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for k, v in enumerate(obj.views):
        write_rgb_png(out / f"rgb_{k:03d}.png", v.rgb)
        write_mask_png(out / f"mask_{k:03d}.png", v.mask)
        names.append(f"rgb_{k:03d}.png")
    save_poses(out / "poses.json", [(v.intrinsics, v.pose) for v in obj.views], names)


def read_views(folder) -> list[RenderedView]:
    folder = _existing(folder)
    views = []
    for k, (intr, pose, name) in enumerate(load_poses(_existing(folder / "poses.json"))):
        rgb = read_rgb_png(_existing(folder / (name or f"rgb_{k:03d}.png")))
        mask = read_mask_png(_existing(folder / f"mask_{k:03d}.png"))
        views.append(RenderedView(rgb, mask, pose, intr))
    return views


def load_dataset(folder) -> ObjectViews:
    folder = _existing(folder)
    scene = SceneSpec.from_json(_existing(folder / "scene.json").read_text())
    return ObjectViews(scene, read_views(folder / "train"))


def pick_sources(spec: str, n_views: int) -> list[int]:
    """``"4"`` -> four evenly spaced views; ``"0,6,12"`` -> those indices."""
    if "," in spec:
        idx = [int(s) for s in spec.split(",")]
    else:
        k = int(spec)
        if not 1 <= k <= n_views:
            raise CliError(f"--sources {k} outside 1..{n_views}")
        idx = [int(i) for i in np.linspace(0, n_views, k, endpoint=False)]
    if min(idx) < 0 or max(idx) >= n_views:
        raise CliError(f"source index out of range for {n_views} views: {idx}")
    return idx


def _model(args):
    state = load_state(_existing(args.checkpoint))
    obj = load_dataset(args.data)
    sources = pick_sources(args.sources, len(obj.views))
    with ad.no_trace(), ad.deterministic(state.config.deterministic):
        cond = conditioning(obj, sources, state.params)
    return state, obj, sources, cond


# ---------------------------------------------------------------- subcommands

def cmd_genscene(args) -> int:
    out = Path(args.out)
    train_obj = make_object(args.template, args.seed, n_views=args.views, size=args.size, rig=args.rig)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scene.json").write_text(train_obj.scene.to_json())
    write_views(out / "train", train_obj)
    if args.eval_views:
        cams = camera_rig("spiral", args.eval_views, intr=default_intrinsics(args.size))
        write_views(out / "eval", render_object(train_obj.scene, cams))
    pts = sample_surface_points(train_obj.scene, args.points, np.random.default_rng([args.seed, 2]))
    write_ply(out / "points.ply", pts.points, pts.labels, colors=label_colors(pts.labels))
    log.info("wrote %s (%d train views, %d eval views)", out, args.views, args.eval_views)
    return 0


def load_config(path) -> dict:
    with open(_existing(path), "rb") as fh:
        raw = tomli.load(fh)
    return dict(raw.get("train", raw))


TRAIN_FLAGS = {"steps": "steps", "lr": "lr", "lam": "lam", "rays": "rays_per_object",
               "objects": "objects_per_batch", "samples": "n_samples", "hidden": "hidden",
               "semantic_mode": "semantic_mode", "checkpoint_every": "checkpoint_every",
               "seed": "seed", "deterministic": "deterministic"}


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    for flag, key in TRAIN_FLAGS.items():
        if getattr(args, flag) is not None:
            cfg[key] = getattr(args, flag)
    if args.fixed_sources:
        cfg["fixed_sources"] = [int(s) for s in args.fixed_sources.split(",")]
    try:
        config = TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad training config: {e}") from e
    dataset = [load_dataset(d) for d in args.data]
    out = Path(args.out)
    state = load_state(_existing(args.resume)) if args.resume else None
    state = train(dataset, config, out, state=state)
    save_state(out / "final.segf", state)
    (out / "config.json").write_text(json.dumps(asdict(config), indent=1, sort_keys=True))
    log.info("trained to step %d", state.step)
    return 0


def _rig_cameras(rig: str, obj: ObjectViews, data: Path):
    if rig == "train":
        return [(v.intrinsics, v.pose) for v in obj.views]
    if rig == "eval":
        return [(i, p) for i, p, _ in load_poses(_existing(data / "eval" / "poses.json"))]
    if rig.startswith("spiral") and rig[6:].isdigit():
        return camera_rig("spiral", int(rig[6:]), intr=obj.views[0].intrinsics)
    raise CliError(f"unknown rig {rig!r} (use spiral<N>, train or eval)")


def cmd_render(args) -> int:
    state, obj, sources, cond = _model(args)
    cams = _rig_cameras(args.rig, obj, Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    with ad.deterministic(state.config.deterministic):
        for k, cam in enumerate(cams):
            img = render_view(cond, cam, state.params, state.field_config, args.samples,
                              np.random.default_rng([args.seed, k]), semantic_mode=state.config.semantic_mode)
            write_rgb_png(out / f"rgb_{k:03d}.png", img.rgb)
            write_mask_png(out / f"mask_{k:03d}.png", img.mask)
            names.append(f"rgb_{k:03d}.png")
    save_poses(out / "poses.json", cams, names)
    log.info("rendered %d views conditioned on views %s", len(cams), sources)
    return 0


def cmd_segment3d(args) -> int:
    state, obj, _, cond = _model(args)
    src = _existing(args.points or Path(args.data) / "points.ply")
    pts = read_ply(src)["points"]
    with ad.deterministic(state.config.deterministic):
        seg = segment_points(cond, pts, state.params, state.field_config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(out / "points.ply", seg.points, seg.labels, colors=label_colors(seg.labels))
    return 0


def cmd_reconstruct(args) -> int:
    state, obj, _, cond = _model(args)
    with ad.deterministic(state.config.deterministic):
        grid = extract_grid(cond, state.params, state.field_config, args.resolution,
                            suppress_background=not args.keep_background, bound=args.bound)
        mesh = marching_cubes(grid, args.iso)
        mesh = label_mesh(mesh, cond, state.params, state.field_config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_raw_volume(out / "density.raw", grid.sigma, {"bound": grid.bound, "iso": args.iso})
    write_ply(out / "mesh.ply", mesh.vertices, mesh.labels, mesh.faces, label_colors(mesh.labels))
    log.info("mesh: %d vertices, %d faces", len(mesh.vertices), len(mesh.faces))
    return 0


# ---------------------------------------------------------------- evaluate

def _image_pairs(pred: Path, gt: Path, prefix: str):
    if pred.is_file() and gt.is_file():
        return [(pred, gt)]
    if not (pred.is_dir() and gt.is_dir()):
        raise CliError(f"--pred and --gt must both be files or both be directories ({pred}, {gt})")
    names = sorted(p.name for p in gt.glob(f"{prefix}_*.png"))
    if not names:
        raise CliError(f"no {prefix}_*.png images in {gt}")
    return [(_existing(pred / n), gt / n) for n in names]


def _labels_on_gt(pred: dict, gt: dict) -> tuple[np.ndarray, str]:
    """Predicted labels at the ground-truth points: by index if the clouds coincide, else nearest vertex."""
    if "labels" not in pred or "labels" not in gt:
        raise CliError("seg3d needs PLY files with a per-vertex 'label' property")
    if len(pred["points"]) == len(gt["points"]) and np.array_equal(pred["points"], gt["points"]):
        return pred["labels"], "index"
    _, idx = cKDTree(pred["points"]).query(gt["points"], k=1)
    return pred["labels"][idx], "nearest"


def evaluate_object(pred: Path, gt: Path, task: str, num_labels: int | None, tau: float, samples: int,
                    seed: int) -> dict:
    if task in ("seg2d", "nvs"):
        pairs = _image_pairs(pred, gt, "mask" if task == "seg2d" else "rgb")
        if task == "nvs":
            vals = [psnr(read_rgb_png(a), read_rgb_png(b)) for a, b in pairs]
            return {"psnr": float(np.mean(vals)), "views": len(pairs)}
        masks = [(read_mask_png(a), read_mask_png(b)) for a, b in pairs]
        n = num_labels or int(max(max(p.max(), t.max()) for p, t in masks)) + 1
        truth = np.concatenate([t.ravel() for _, t in masks])
        guess = np.concatenate([p.ravel() for p, _ in masks])
        return {**seg_report(truth, guess, n, "seg2d"), "views": len(pairs)}
    p, g = read_ply(pred), read_ply(gt)
    if task == "seg3d":
        labels, how = _labels_on_gt(p, g)
        n = num_labels or int(max(labels.max(), g["labels"].max())) + 1
        return {**seg_report(g["labels"], labels, n, "seg3d"), "label_transfer": how}
    pts = p["points"]
    if "faces" in p:
        mesh = SemanticMesh(p["points"], p["faces"])
        pts = np.zeros((0, 3)) if mesh.empty else sample_mesh_surface(mesh, samples, np.random.default_rng(seed))
    if len(pts) == 0:
        raise CliError(f"{pred}: prediction has no points")
    return chamfer_fscore(pts, g["points"], tau).to_dict()


def _mean_metrics(per_object: list[dict]) -> dict:
    # counts and settings are per-object bookkeeping, not scores to average
    keys = [k for k, v in per_object[0].items() if isinstance(v, float) and k != "tau"]
    return {k: float(np.mean([o[k] for o in per_object])) for k in keys}


def format_table(report: dict) -> str:
    rows = [f"task: {report['task']}  objects: {report['objects']}  granularity: {report['granularity']}"]
    for k, v in sorted(report["metrics"].items()):
        rows.append(f"  {k:<16s} {v:.6g}")
    return "\n".join(rows)


def cmd_evaluate(args) -> int:
    if len(args.pred) != len(args.gt):
        raise CliError(f"--pred lists {len(args.pred)} paths but --gt lists {len(args.gt)}")
    per_object = []
    for pred, gt in zip(args.pred, args.gt):
        per_object.append(evaluate_object(_existing(pred), _existing(gt), args.task, args.num_labels,
                                          args.tau, args.samples, args.seed))
    report = {"schema": METRICS_SCHEMA, "task": args.task, "granularity": GRANULARITY,
              "objects": len(per_object), "metrics": _mean_metrics(per_object), "per_object": per_object}
    if args.task == "recon":
        report["tau"] = args.tau
    text = json.dumps(report, sort_keys=True)
    print(format_table(report))
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(text + "\n")
    return 0


# ---------------------------------------------------------------- bench

def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    cfg = FieldConfig(num_classes=2, hidden=args.hidden)
    params = {**init_encoder(rng), **init_field(cfg, rng)}
    size = 64
    feats = ad.Tensor(rng.standard_normal((args.views, 64, size // 4, size // 4)).astype(np.float32))
    cams = camera_rig("uniform", args.views, rng, default_intrinsics(size))
    cond = ConditioningSet(feats, cams)
    x = rng.uniform(-1, 1, (args.points, 3))
    d = rng.standard_normal((args.points, 3))
    times = []
    with ad.no_trace(), ad.deterministic(True):
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            field_eval_batch(cond, x, d, params, cfg)
            times.append(time.perf_counter() - t0)
    best = min(times)
    res = {"hidden": args.hidden, "views": args.views, "points": args.points,
           "seconds": best, "points_per_second": args.points / best}
    print(json.dumps(res, sort_keys=True))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "bench.json").write_text(json.dumps(res, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="segfield", description=__doc__.split("\n")[0])
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True, seed=0):
        p.add_argument("--seed", type=int, default=seed)
        p.add_argument("--out", required=out_required)
        return p

    def model_flags(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="dataset directory written by genscene")
        p.add_argument("--sources", default="4", help="count of evenly spaced views, or comma list")

    p = common(sub.add_parser("genscene", help="synthesize a labeled multi-view object"))
    p.add_argument("--template", choices=sorted(TEMPLATES), default="dumbbell")
    p.add_argument("--views", type=int, default=24)
    p.add_argument("--eval-views", type=int, default=25)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--rig", choices=["uniform", "spiral"], default="uniform")
    p.add_argument("--points", type=int, default=4096)
    p.set_defaults(func=cmd_genscene)

    p = common(sub.add_parser("train", help="fit the encoder and field"), seed=None)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--config")
    p.add_argument("--resume")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--rays", type=int)
    p.add_argument("--objects", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--semantic-mode", choices=["volume", "surface"])
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--fixed-sources", help="comma list of conditioning views")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("render", help="render RGB and part masks for a camera rig"))
    model_flags(p)
    p.add_argument("--rig", default="spiral25")
    p.add_argument("--samples", type=int, default=128)
    p.set_defaults(func=cmd_render)

    p = common(sub.add_parser("segment3d", help="label a point cloud"))
    model_flags(p)
    p.add_argument("--points", help="PLY point cloud (default: DATA/points.ply)")
    p.set_defaults(func=cmd_segment3d)

    p = common(sub.add_parser("reconstruct", help="extract a labeled mesh"))
    model_flags(p)
    p.add_argument("--resolution", type=int, default=GRID_RESOLUTION)
    p.add_argument("--iso", type=float, default=ISO_THRESHOLD)
    p.add_argument("--bound", type=float, default=GRID_BOUND)
    p.add_argument("--keep-background", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    p = common(sub.add_parser("evaluate", help="score predictions against ground truth"), out_required=False)
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--task", choices=["seg2d", "seg3d", "recon", "nvs"], required=True)
    p.add_argument("--num-labels", type=int)
    p.add_argument("--tau", type=float, default=0.02)
    p.add_argument("--samples", type=int, default=4096, help="points sampled from a predicted mesh")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("bench", help="field evaluation throughput"), out_required=False)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--views", type=int, default=1)
    p.add_argument("--points", type=int, default=65536)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError) as e:
        print(f"segfield {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
