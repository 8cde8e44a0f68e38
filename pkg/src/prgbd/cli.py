"""Command line entry point: ``prgbd {run,track,refine,eval,gen}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .depth_refiner import propagate_to_nonkeyframes, refine_depths
from .driver import RunConfig, emit_reports, run_self_improving, trajectory_report
from .errors import InitializationFailure, InvalidConfig, LostTracking, PRGBDError
from .evaluation import read_tum, sequence_depth_metrics, trajectory_metrics
from .keyframe_graph import dump_graph, filter_outliers_all
from .pose_backend import track_sequence, write_tum
from .scene_sim import corrupt_sequence, generate_scene, load_sequence, save_sequence

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_LOST = 3
EXIT_IO = 4

log = logging.getLogger("prgbd")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.keyframe_stride is not None:
        over["keyframe_stride"] = args.keyframe_stride
    if args.ba_window is not None:
        over["ba_window"] = args.ba_window
    if getattr(args, "loops", None) is not None:
        over["max_loops"] = args.loops
    if args.no_scale_align:
        over["with_scale"] = False
    return replace(cfg, **over) if over else cfg


def _load_depths(path, n: int) -> list[np.ndarray]:
    with np.load(path) as data:
        depths = data["depths"]
    if len(depths) != n:
        raise InvalidConfig(f"{path}: {len(depths)} depth maps for {n} frames")
    return [np.asarray(d, dtype=np.float64) for d in depths]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    seq = generate_scene(cfg.scene)
    out = _out_dir(args)
    save_sequence(seq, out / "sequence.npz")
    write_tum(out / "groundtruth.txt", seq.timestamps, seq.gt_poses)
    np.savez_compressed(out / "corrupted_depths.npz", depths=np.stack(corrupt_sequence(seq, cfg.noise_model())))
    print(json.dumps({"frames": len(seq), "d_max_gt": seq.d_max_gt, "checksum": seq.checksum()}))
    return EXIT_OK


def _sequence_and_depths(args, cfg):
    seq = generate_scene(cfg.scene)
    if args.depth:
        depths = _load_depths(args.depth, len(seq))
    else:
        depths = corrupt_sequence(seq, cfg.noise_model())
    return seq, depths


def cmd_track(args) -> int:
    cfg = _load_config(args)
    seq, depths = _sequence_and_depths(args, cfg)
    res = track_sequence(seq, depths, cfg.tracking_params())
    out = _out_dir(args)
    write_tum(out / "trajectory.txt", seq.timestamps, res.poses)
    dump_graph(res.graph, out / "map.txt")
    if all(s != "tracked" for s in res.status[1:]):
        raise LostTracking("tracking lost on every frame")
    m = trajectory_report(res, seq, cfg.with_scale)
    print(json.dumps({"lost_fraction": res.lost_fraction, "keyframes": len(res.graph.keyframes), **asdict(m)}))
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = _load_config(args)
    seq, depths = _sequence_and_depths(args, cfg)
    res = track_sequence(seq, depths, cfg.tracking_params())
    graph = filter_outliers_all(res.graph)
    refined = refine_depths(seq.images, res, depths, replace(cfg.refiner, weights=cfg.weights), graph=graph)
    fields = propagate_to_nonkeyframes(refined.fields, res, graph)
    out = _out_dir(args)
    np.savez_compressed(out / "refined_depths.npz", depths=np.stack(fields))
    before = sequence_depth_metrics(depths, seq.gt_depths, cap=seq.d_max_gt)
    after = sequence_depth_metrics(fields, seq.gt_depths, cap=seq.d_max_gt)
    print(json.dumps({
        "loss_before": refined.loss_before,
        "loss_after": refined.loss_after,
        "no_descent": refined.no_descent,
        "abs_rel_before": before.abs_rel,
        "abs_rel_after": after.abs_rel,
    }))
    return EXIT_OK


def cmd_eval(args) -> int:
    out = {}
    if args.est and args.gt:
        _, est = read_tum(args.est)
        _, gt = read_tum(args.gt)
        out["trajectory"] = asdict(trajectory_metrics(est, gt, with_scale=not args.no_scale_align))
    if args.pred_depth and args.sequence:
        seq = load_sequence(args.sequence)
        preds = _load_depths(args.pred_depth, len(seq))
        cap = args.cap if args.cap is not None else seq.d_max_gt
        out["depth"] = sequence_depth_metrics(preds, seq.gt_depths, cap=cap).as_dict()
    if not out:
        raise InvalidConfig("eval needs --est and --gt, and/or --pred-depth and --sequence")
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    result = run_self_improving(cfg)
    paths = emit_reports(result, args.out)
    final = result.reports[-1]
    print(json.dumps({
        "termination": result.termination,
        "loops": len(result.reports) - 1,
        "abs_rel": [r.depth[100].abs_rel for r in result.reports],
        "ate_rmse": [r.trajectory.ate_rmse for r in result.reports],
        "final_lost_fraction": final.lost_fraction,
        "outputs": {k: str(v) for k, v in paths.items()},
    }, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scene/run key = value file")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, help="root seed for depth noise and correspondence noise")
    common.add_argument("--keyframe-stride", type=int, dest="keyframe_stride")
    common.add_argument("--ba-window", type=int, dest="ba_window")
    common.add_argument("--no-scale-align", action="store_true", dest="no_scale_align",
                        help="align trajectories with SE3 instead of Sim3")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="prgbd", description="Self-improving pseudo RGB-D depth and pose refinement.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="full self-improving loop")
    run.add_argument("--loops", type=int, help="maximum number of refinement loops")
    run.set_defaults(func=cmd_run)
    for name, func, text in (("track", cmd_track, "pose tracking only"), ("refine", cmd_refine, "one depth refinement sweep")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--depth", help="npz with a 'depths' array (frames, H, W); default: corrupted ground truth")
        sp.set_defaults(func=func)
    ev = sub.add_parser("eval", parents=[common], help="metrics on files")
    ev.add_argument("--est", help="estimated TUM trajectory")
    ev.add_argument("--gt", help="reference TUM trajectory")
    ev.add_argument("--pred-depth", dest="pred_depth", help="npz with predicted depths")
    ev.add_argument("--sequence", help="sequence.npz written by gen")
    ev.add_argument("--cap", type=float, help="depth cap in meters (default: scene depth range)")
    ev.set_defaults(func=cmd_eval)
    gen = sub.add_parser("gen", parents=[common], help="render a scene only")
    gen.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (LostTracking, InitializationFailure) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_LOST
    except (PRGBDError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
