"""Command line interface: one subcommand per pipeline stage plus ``pipeline``.

Exit codes: 0 success, 2 configuration error, 3 tracking loss, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .exceptions import StageError, TrackingError
from .fusion import integrate_frame, load_volume, save_volume
from .geometry import CameraIntrinsics
from .label_fusion import LabelVolume, fuse_frame_labels, load_label_volume, save_label_volume
from .materials import load_response_table
from .query import build_octree, load_events, raycast_query, replay_impacts
from .semantics import (argmax_labels, load_probability_map, save_label_pgm,
                        save_probability_map)
from .synthetic import RgbdFrame, load_trajectory, save_trajectory

EXIT_OK, EXIT_CONFIG, EXIT_TRACKING, EXIT_IO = 0, 2, 3, 4
FRAMES_FILE = "frames.npz"


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _config(args) -> pl.PipelineConfig:
    cfg = pl.load_config(args.config) if args.config else pl.PipelineConfig()
    over = _parse_set(args.set)
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "output_dir", None):
        over["output_dir"] = str(Path(args.output_dir).resolve())
    if getattr(args, "frames_count", None) is not None:
        over["trajectory.n_frames"] = args.frames_count
    if getattr(args, "no_crf", False):
        over["crf.enabled"] = False
    return cfg.with_overrides(**over) if over else cfg


def save_frames(frames, intrinsics: CameraIntrinsics, path):
    np.savez(path, depth=np.stack([f.depth for f in frames]), color=np.stack([f.color for f in frames]),
             labels=np.stack([f.true_labels for f in frames]),
             intrinsics=np.array(json.dumps(intrinsics.to_dict())))


def load_frames(path):
    with np.load(path) as z:
        intr = CameraIntrinsics.from_dict(json.loads(str(z["intrinsics"])))
        frames = [RgbdFrame(d, c, l, k) for k, (d, c, l) in
                  enumerate(zip(z["depth"], z["color"], z["labels"]))]
    return frames, intr


def _out_dir(args, cfg) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print(doc):
    print(json.dumps(doc, indent=2, sort_keys=True))


# -- subcommands --------------------------------------------------------------

def cmd_render(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    scene = pl.make_scene(cfg)
    poses = pl.make_trajectory(cfg)
    intr = cfg.intrinsics()
    frames = pl.render_sequence(scene, intr, poses, cfg.sensor_noise(pl.sub_seed(cfg["seed"], "sensor_noise")))
    save_frames(frames, intr, out / FRAMES_FILE)
    save_trajectory(poses, out / pl.ARTIFACTS["trajectory_gt"])
    _print({"frames": len(frames), "output": str(out / FRAMES_FILE)})


def cmd_track(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    frames, intr = load_frames(args.frames)
    first = load_trajectory(args.init)[0] if args.init else pl.make_trajectory(cfg)[0]
    vol = pl.make_volume(cfg, pl.make_scene(cfg))
    res = pl.track_and_fuse(frames, intr, first, vol, cfg.icp(), cfg["volume"]["edge_threshold"])
    save_trajectory(res.poses, out / pl.ARTIFACTS["trajectory_est"])
    save_volume(vol, out / pl.ARTIFACTS["volume"])
    if res.failed_frame is not None:
        raise StageError("track", f"tracking lost at frame {res.failed_frame}: {res.error} "
                                  f"(partial trajectory of {len(res.poses)} poses written)", EXIT_TRACKING)
    _print({"frames_tracked": len(res.poses), "voxels_touched": vol.touched()})


def cmd_fuse(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    frames, intr = load_frames(args.frames)
    poses = load_trajectory(args.trajectory)
    if len(poses) != len(frames):
        raise ValueError("trajectory and frames differ in length")
    vol = pl.make_volume(cfg, pl.make_scene(cfg))
    for f, p in zip(frames, poses):
        integrate_frame(vol, f.depth, p, intr, cfg["volume"]["edge_threshold"])
    save_volume(vol, out / pl.ARTIFACTS["volume"])
    _print({"voxels_touched": vol.touched()})


def cmd_segment(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    frames, _ = load_frames(args.frames)
    crf = cfg.crf()
    for k, f in enumerate(frames):
        prob = pl.segment_frame(f, cfg, pl.sub_seed(cfg["seed"], f"segmenter/{k}"), crf)
        save_probability_map(prob, out / f"seg_{k:04d}.pmap")
        save_label_pgm(argmax_labels(prob), out / f"labels_{k:04d}.pgm")
    _print({"frames": len(frames), "output": str(out)})


def cmd_label_fuse(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    frames, intr = load_frames(args.frames)
    poses = load_trajectory(args.trajectory)
    vol = load_volume(args.volume, cfg["volume"]["max_weight"])
    if args.segments:
        lv = LabelVolume.for_volume(vol)
        for k, (f, p) in enumerate(zip(frames, poses)):
            prob = load_probability_map(Path(args.segments) / f"seg_{k:04d}.pmap")
            fuse_frame_labels(lv, prob, f.depth, p, intr, vol)
    else:
        lv = pl.fuse_labels(frames, poses, intr, vol, cfg)
    save_label_volume(lv, out / pl.ARTIFACTS["labels"])
    _print({"observed_voxels": len(lv.keys), "pixels_outside": lv.skipped})


def cmd_extract(args):
    cfg = _config(args)
    vol = load_volume(args.volume, cfg["volume"]["max_weight"])
    lv = load_label_volume(args.labels)
    points, model = pl.build_labeled_model(vol, lv, int(cfg["fusion"]["min_observations"]))
    out = Path(args.out) if args.out else _out_dir(args, cfg) / pl.ARTIFACTS["ply"]
    pl.export_ply(model, out)
    _print({"points": len(points), "labeled_points": len(model), "dropped_points": model.dropped,
            "output": str(out)})


def _model_and_tree(args, cfg):
    model = pl.read_ply(args.model)
    oc = cfg["octree"]
    tree = build_octree(model, int(oc["leaf_capacity"]), int(oc["max_depth"]))
    radius = args.radius or oc["radius"]
    if radius is None:
        # same default as the pipeline: one voxel of the configured grid
        radius = pl.make_volume(cfg, pl.make_scene(cfg)).voxel_size
    return model, tree, float(radius)


def cmd_query(args):
    cfg = _config(args)
    model, tree, radius = _model_and_tree(args, cfg)
    hit = raycast_query(tree, model, args.origin, args.direction, radius)
    _print({"hit": False} if hit is None else {"hit": True, **hit.to_dict()})


def cmd_simulate(args):
    cfg = _config(args)
    model, tree, radius = _model_and_tree(args, cfg)
    table = load_response_table(args.table or cfg.path("material_table"))
    results = replay_impacts(load_events(args.events), tree, model, table, radius)
    text = json.dumps(results, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_pipeline(args):
    cfg = _config(args)
    result = pl.run_pipeline(cfg, resume_from=args.resume_from)
    _print(result.report.to_dict())


def cmd_metrics(args):
    est = load_trajectory(args.estimated)
    truth = load_trajectory(args.truth)
    doc = {"ate_rmse_m": pl.compute_ate(est, truth)}
    if args.model:
        cfg = _config(args)
        scene = pl.make_scene(cfg)
        model = pl.read_ply(args.model)
        doc["surface_mean_m"], doc["surface_p95_m"] = pl.surface_stats(scene, model.positions)
        doc["label_accuracy"] = pl.label_accuracy(scene, model)
    _print(doc)


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matfusion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="pipeline config JSON")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field (dotted key, JSON value)")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.set_defaults(func=fn)
        return sp

    sp = add("render", cmd_render, "render RGB-D frames and the ground-truth trajectory")
    sp.add_argument("--out")
    sp.add_argument("--frames-count", type=int, help="number of orbit frames")

    sp = add("track", cmd_track, "ICP tracking with interleaved TSDF fusion")
    sp.add_argument("--frames", required=True)
    sp.add_argument("--init", help="trajectory file whose first pose seeds tracking")
    sp.add_argument("--out")

    sp = add("fuse", cmd_fuse, "integrate frames at given poses into a TSDF volume")
    sp.add_argument("--frames", required=True)
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--out")

    sp = add("segment", cmd_segment, "per-frame material probabilities (+CRF)")
    sp.add_argument("--frames", required=True)
    sp.add_argument("--no-crf", action="store_true")
    sp.add_argument("--out")

    sp = add("label-fuse", cmd_label_fuse, "fuse per-frame probabilities into a label volume")
    sp.add_argument("--frames", required=True)
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--volume", required=True)
    sp.add_argument("--segments", help="directory of seg_NNNN.pmap files (segments on the fly if omitted)")
    sp.add_argument("--out")

    sp = add("extract", cmd_extract, "labelled surface points to PLY")
    sp.add_argument("--volume", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--out", help="PLY path")

    sp = add("query", cmd_query, "material ray query against a labelled PLY")
    sp.add_argument("--model", required=True)
    sp.add_argument("--origin", type=float, nargs=3, required=True)
    sp.add_argument("--direction", type=float, nargs=3, required=True)
    sp.add_argument("--radius", type=float)

    sp = add("simulate", cmd_simulate, "replay impact events against a labelled PLY")
    sp.add_argument("--model", required=True)
    sp.add_argument("--events", required=True)
    sp.add_argument("--table", help="material response table JSON")
    sp.add_argument("--radius", type=float)
    sp.add_argument("--out")

    sp = add("pipeline", cmd_pipeline, "run every stage and write all artifacts")
    sp.add_argument("--output-dir")
    sp.add_argument("--frames-count", type=int)
    sp.add_argument("--no-crf", action="store_true")
    sp.add_argument("--resume-from", choices=pl.RESUME_POINTS)

    sp = add("metrics", cmd_metrics, "ATE between trajectories, optionally surface/label metrics")
    sp.add_argument("--estimated", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--model", help="labelled PLY evaluated against the config scene")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except TrackingError as e:
        print(f"error: tracking lost: {e}", file=sys.stderr)
        return EXIT_TRACKING
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
