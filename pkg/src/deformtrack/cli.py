"""Command-line pipeline: track, synth, eval, preselect.

This is the only module that touches the filesystem; everything below it is
pure given its inputs. Outputs are written frame by frame, so a failure in
frame k leaves frames 0..k-1 on disk. All writers are deterministic, and the
effective configuration is echoed into every report, so a report's config
re-runs the exact same pipeline.

Verbosity comes from the DEFORMTRACK_LOG environment variable
(error|warn|info|debug, default warn).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .config import RunConfig, load_config
from .correspond import Observation, estimate_point_normals
from .exceptions import (
    ConfigError,
    DeformtrackError,
    NoValidHypothesis,
    SizeMismatch,
)
from .geometry import PinholeCamera
from .matching import preselect_inliers
from .synth import SceneSpec, evaluate, generate_sequence
from .tracking import prepare_template, track_frame
from .warpfield import Template

log = logging.getLogger("deformtrack")

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}
_DEPTH_SUFFIXES = (".pfm", ".csv")


def _setup_logging() -> None:
    wanted = os.environ.get("DEFORMTRACK_LOG", "warn").lower()
    level = _LOG_LEVELS.get(wanted)
    if level is None:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)
    if wanted not in _LOG_LEVELS:
        log.warning("unknown DEFORMTRACK_LOG value %r; using warn", wanted)


def _load_run_config(args) -> RunConfig:
    if args.config is not None:
        config = load_config(fileio.read_json(args.config), where=str(args.config))
    else:
        config = RunConfig()
    if args.threads is not None:
        config.threads = args.threads
    if args.seed is not None:
        config.seed = args.seed
    return config


def _camera_from_config(config: RunConfig) -> PinholeCamera:
    c = config.camera
    return PinholeCamera(c.fx, c.fy, c.cx, c.cy, c.width, c.height)


def _frame_files(frames_dir: Path) -> list[Path]:
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"frames directory {frames_dir} does not exist")
    files = sorted(
        p for p in frames_dir.iterdir() if p.suffix.lower() in _DEPTH_SUFFIXES
    )
    if not files:
        raise DeformtrackError(f"no depth frames (*.pfm or *.csv) in {frames_dir}")
    return files


def _cmd_track(args) -> int:
    config = _load_run_config(args)
    camera = _camera_from_config(config)
    points, normals = fileio.read_ply(args.template)
    if normals is None:
        log.warning("%s carries no normals; estimating them from the points", args.template)
        normals = estimate_point_normals(points)
    frame_files = _frame_files(args.frames)
    if args.matches is None:
        log.warning("no --matches directory; tracking with depth and rigidity terms only")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    bound, graph = prepare_template(Template(points, normals), config)
    log.info("template: %d points, %d control points", len(points), len(graph))

    config_echo = config.to_dict()
    for frame_id, frame_path in enumerate(frame_files):
        depth = fileio.read_depth(frame_path)
        observation = Observation.from_depth(
            depth, camera,
            frame_id=frame_id,
            z_min=config.depth.z_min,
            z_max=config.depth.z_max,
        )
        matches = None
        if args.matches is not None:
            match_path = Path(args.matches) / f"{frame_path.stem}.json"
            if match_path.exists():
                matches = fileio.read_matches(match_path)
            else:
                log.warning("no match file for frame %s; feature term dropped", frame_path.stem)
        result = track_frame(bound, graph, observation, matches, config)
        graph = result.graph

        fileio.write_ply(out_dir / f"{frame_path.stem}.ply", result.points, result.normals)
        fileio.write_json(
            out_dir / f"{frame_path.stem}.report.json",
            {"report": result.report.to_dict(), "config": config_echo},
        )
        if result.matches is not None:
            fileio.write_matches(out_dir / f"{frame_path.stem}.matches.json", result.matches)
        for message in result.report.warnings:
            log.warning("frame %s: %s", frame_path.stem, message)
        log.info(
            "frame %s: %d correspondences, total cost %.6g, converged=%s",
            frame_path.stem,
            result.report.n_correspondences,
            result.report.total_cost,
            result.report.converged,
        )
    return 0


def _scene_spec_from_json(path: Path) -> tuple[SceneSpec, int]:
    payload = fileio.read_json(path)
    n_frames = payload.pop("n_frames", 20)
    if not isinstance(n_frames, int) or isinstance(n_frames, bool) or n_frames < 1:
        raise ConfigError(f"{path}: n_frames must be a positive integer")
    allowed = {f.name for f in dataclasses.fields(SceneSpec)}
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown scene key(s) {unknown}")
    for key, value in payload.items():
        if isinstance(value, list):
            payload[key] = tuple(value)
    try:
        return SceneSpec(**payload), n_frames
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _cmd_synth(args) -> int:
    spec, n_frames = _scene_spec_from_json(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    sequence = generate_sequence(spec, n_frames)

    out_dir = Path(args.out)
    for sub in ("frames", "matches", "truth"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    fileio.write_ply(out_dir / "template.ply", sequence.template.points, sequence.template.normals)
    cam = sequence.camera
    fileio.write_json(
        out_dir / "scene.json",
        {
            "spec": {**dataclasses.asdict(spec), "n_frames": n_frames},
            "camera": dataclasses.asdict(cam),
        },
    )
    for frame in sequence.frames:
        stem = f"frame_{frame.frame_id:04d}"
        fileio.write_pfm(out_dir / "frames" / f"{stem}.pfm", frame.observation.depth)
        fileio.write_matches(out_dir / "matches" / f"{stem}.json", frame.matches)
        fileio.write_ply(out_dir / "truth" / f"{stem}.ply", frame.truth.points)
    log.info("wrote %d frames to %s", len(sequence.frames), out_dir)
    return 0


def _cmd_eval(args) -> int:
    recovered = sorted(Path(args.recovered).glob("*.ply"))
    truth = sorted(Path(args.truth).glob("*.ply"))
    if not recovered or not truth:
        raise DeformtrackError(
            f"no surfaces to compare ({len(recovered)} recovered, {len(truth)} truth)"
        )
    if len(recovered) != len(truth):
        raise SizeMismatch(
            f"{len(recovered)} recovered frames vs {len(truth)} truth frames"
        )
    rows = []
    for rec_path, truth_path in zip(recovered, truth):
        rec_points, _ = fileio.read_ply(rec_path)
        truth_points, _ = fileio.read_ply(truth_path)
        metrics = evaluate(rec_points, truth_points)
        rows.append({"frame": rec_path.stem, **metrics.to_row()})
        log.info("%s: rmse %.4f mm", rec_path.stem, metrics.rmse)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fileio.write_metrics_csv(args.out, rows)
    return 0


def _cmd_preselect(args) -> int:
    config = _load_run_config(args)
    matches = fileio.read_matches(args.matches)
    payload: dict = {"n_matches": len(matches)}
    if len(matches) == 0:
        log.warning("%s holds no matches; writing an empty result", args.matches)
        payload.update({"weights": [], "preselected": [], "warning": "no matches"})
    else:
        try:
            outcome = preselect_inliers(matches, config.make_preselect_config())
            payload.update(
                {
                    "weights": outcome.matches.weights.tolist(),
                    "preselected": outcome.matches.preselected.tolist(),
                    "rotation": outcome.rotation.tolist(),
                    "reference_index": outcome.reference_index,
                    "support": outcome.support,
                }
            )
        except NoValidHypothesis as exc:
            log.warning("preselection failed: %s", exc)
            payload.update(
                {
                    "weights": [0.0] * len(matches),
                    "preselected": [False] * len(matches),
                    "warning": f"no valid hypothesis ({exc}); weights zeroed",
                }
            )
    fileio.write_json(args.out, payload)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="override config thread count")
    common.add_argument("--seed", type=int, default=None, help="override config seed")

    parser = argparse.ArgumentParser(
        prog="deformtrack",
        description="Track a deforming surface through a depth-map sequence.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    track = sub.add_parser("track", parents=[common], help="track a template through depth frames")
    track.add_argument("--config", type=Path, default=None, help="run configuration JSON")
    track.add_argument("--template", type=Path, required=True, help="reference surface PLY")
    track.add_argument("--frames", type=Path, required=True, help="directory of depth maps (.pfm/.csv)")
    track.add_argument("--matches", type=Path, default=None, help="directory of per-frame match JSON")
    track.add_argument("--out", type=Path, required=True, help="output directory")
    track.set_defaults(func=_cmd_track)

    synth = sub.add_parser("synth", parents=[common], help="render a synthetic sequence")
    synth.add_argument("--spec", type=Path, required=True, help="scene spec JSON")
    synth.add_argument("--out", type=Path, required=True, help="output directory")
    synth.set_defaults(func=_cmd_synth)

    ev = sub.add_parser("eval", parents=[common], help="compare recovered surfaces against truth")
    ev.add_argument("--recovered", type=Path, required=True, help="directory of recovered PLYs")
    ev.add_argument("--truth", type=Path, required=True, help="directory of ground-truth PLYs")
    ev.add_argument("--out", type=Path, required=True, help="metrics CSV path")
    ev.set_defaults(func=_cmd_eval)

    pre = sub.add_parser("preselect", parents=[common], help="run match preselection alone")
    pre.add_argument("--matches", type=Path, required=True, help="match JSON file")
    pre.add_argument("--config", type=Path, default=None, help="run configuration JSON")
    pre.add_argument("--out", type=Path, required=True, help="output JSON path")
    pre.set_defaults(func=_cmd_preselect)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DeformtrackError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
