"""Command-line front end: run odometry, render datasets, score trajectories.

Exit codes: 0 on success, 2 when tracking was lost mid-sequence (the partial
trajectory is still written), 1 on malformed input of any kind.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..config import load_config
from ..errors import InsufficientOverlap, MalformedDataset
from .dataset import export_dataset, ingest_dataset
from .metrics import compute_alignment_error, read_trajectory
from .pipeline import DatasetStream, SceneStream, run_odometry
from .scene import scene_from_toml

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusevo",
        description="Tightly-coupled direct+indirect monocular visual odometry",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run odometry over a dataset or scene file")
    run.add_argument("--input", required=True,
                     help="dataset directory, or a .toml scene description")
    run.add_argument("--config", default=None, help="engine config TOML")
    run.add_argument("--output", default=None, help="directory for trajectory/map/diagnostics")
    run.add_argument("--init", choices=("gt", "filter"), default="gt",
                     help="first-keyframe depth: ground truth or filter prior")
    run.add_argument("--single-thread", action="store_true",
                     help="run mapping inline instead of on a worker thread")
    run.add_argument("--disable-indirect", action="store_true",
                     help="drop the geometric residual family")
    run.add_argument("--disable-direct-corners", action="store_true",
                     help="exclude corners from photometric support")
    run.add_argument("--force-K", type=float, default=None,
                     help="pin the coupling weight instead of scheduling it")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="config override (repeatable)")
    run.add_argument("--seed", type=int, default=0, help="mapper RNG seed")

    render = sub.add_parser("render", help="render a scene file to a dataset directory")
    render.add_argument("--scene", required=True, help=".toml scene description")
    render.add_argument("--output", required=True, help="dataset directory to create")

    ev = sub.add_parser("eval", help="score an estimated trajectory against ground truth")
    ev.add_argument("--est", required=True, help="estimated trajectory file")
    ev.add_argument("--gt", required=True, help="ground-truth trajectory file")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set)
    path = Path(args.input)
    if path.suffix == ".toml":
        stream = SceneStream(scene_from_toml(path))
    else:
        stream = DatasetStream(ingest_dataset(path))
    report = run_odometry(
        stream,
        cfg,
        init=args.init,
        single_thread=args.single_thread,
        use_geometric=not args.disable_indirect,
        use_direct_corners=not args.disable_direct_corners,
        force_K=args.force_K,
        out_dir=args.output,
        seed=args.seed,
    )
    print(f"frames tracked : {report.num_frames}")
    print(f"keyframes      : {report.num_keyframes}")
    print(f"ate_rmse       : {report.ate_rmse:.6f}")
    print(f"mean error     : {report.alignment_error:.6f}")
    print(f"drift per meter: {report.drift_per_meter:.6f}")
    if report.tracking_lost_at is not None:
        print(f"tracking lost at frame {report.tracking_lost_at}", file=sys.stderr)
        return 2
    return 0


def _cmd_render(args: argparse.Namespace) -> int:
    scene = scene_from_toml(args.scene)
    out = export_dataset(scene, args.output)
    print(f"wrote {scene.num_frames} frames to {out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    t_e, p_e, _ = read_trajectory(args.est)
    t_g, p_g, _ = read_trajectory(args.gt)
    report = compute_alignment_error((t_e, p_e), (t_g, p_g))
    print(f"matched poses  : {report.num_frames}")
    print(f"ate_rmse       : {report.ate_rmse:.6f}")
    print(f"mean error     : {report.alignment_error:.6f}")
    print(f"drift per meter: {report.drift_per_meter:.6f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "render":
            return _cmd_render(args)
        return _cmd_eval(args)
    except (MalformedDataset, InsufficientOverlap) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
