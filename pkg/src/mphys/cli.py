"""Command-line entry points: simulate, estimate, render, metrics, validate, prompt.

Exit codes: 0 success, 2 validation or parse error, 3 instability,
4 initialization/backend failure.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys

from . import __version__
from .errors import BackendUnavailable, InitFailed, MphysError, ParseError, Unstable, ValidationError
from .estimate import (
    HttpBackend,
    InitRequest,
    MockBackend,
    OptimizerConfig,
    ReplayBackend,
    build_prompt,
    initialize,
    optimize,
)
from .motion import ecms, flow_from_snapshots, render_frame, write_ppm
from .mpm import Trajectory, simulate
from .scene import Camera, parse_scene_file

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_UNSTABLE = 3
EXIT_INIT = 4


def _manifest(args, command: str) -> dict:
    return {
        "command": command,
        "scene": getattr(args, "scene", None),
        "out": getattr(args, "out", None),
        "seed": getattr(args, "seed", None),
        "deterministic": getattr(args, "deterministic", False),
        "threads": getattr(args, "threads", 1),
        "version": __version__,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "completed_at": None,
    }


def _write_manifest(out_dir: str, manifest: dict) -> None:
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def _finish_manifest(out_dir: str, manifest: dict) -> None:
    manifest["completed_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    _write_manifest(out_dir, manifest)


def _load_scene(args):
    scene = parse_scene_file(args.scene)
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace

        scene = replace(scene, seed=args.seed)
    return scene


def cmd_simulate(args) -> int:
    scene = _load_scene(args)
    os.makedirs(args.out, exist_ok=True)
    manifest = _manifest(args, "simulate")
    _write_manifest(args.out, manifest)
    params_by_group = None
    if args.material:
        from .material import params_from_json_dict

        with open(args.material) as f:
            override = params_from_json_dict(json.load(f))
        params_by_group = {g: override for g in scene.materials}
    traj = simulate(scene, params_by_group=params_by_group)
    traj.save(os.path.join(args.out, "trajectory.mphy"))
    traj.save_summary_csv(os.path.join(args.out, "summary.csv"))
    _finish_manifest(args.out, manifest)
    print(f"wrote {traj.n_frames} snapshots of {traj.n_particles} particles to {args.out}")
    return EXIT_OK


def _make_backend(args):
    if args.backend == "mock":
        return MockBackend()
    if args.backend == "replay":
        if not args.transcript:
            raise ValidationError("--backend replay requires --transcript")
        return ReplayBackend(args.transcript)
    return HttpBackend()


def cmd_estimate(args) -> int:
    scene = _load_scene(args)
    reference = Trajectory.load(args.reference)
    os.makedirs(args.out, exist_ok=True)
    manifest = _manifest(args, "estimate")
    _write_manifest(args.out, manifest)
    backend = _make_backend(args)
    init = initialize(InitRequest(prompt=args.prompt, image_path=args.image), backend)
    cfg = OptimizerConfig(
        max_iterations=args.max_iterations, m_boost=args.m_boost,
        fd_workers=max(1, args.threads),
    )
    report = optimize(scene, init.params, reference, cfg)
    report.clamp_events = init.clamp_events + report.clamp_events
    report.transcript = init.transcript
    report.save(os.path.join(args.out, "report.json"))
    report.save_loss_csv(os.path.join(args.out, "loss_trace.csv"))
    with open(os.path.join(args.out, "final_params.json"), "w") as f:
        json.dump(report.final_params.to_json_dict(), f, indent=2)
    with open(os.path.join(args.out, "transcript.json"), "w") as f:
        json.dump(init.transcript, f, indent=2)
    _finish_manifest(args.out, manifest)
    print(
        f"estimated {report.final_params.material_class.value} in "
        f"{len(report.loss_trace)} iterations ({report.stop_reason})"
    )
    return EXIT_OK


def _camera_for(args) -> Camera:
    if getattr(args, "scene", None):
        return parse_scene_file(args.scene).camera
    return Camera()


def cmd_render(args) -> int:
    traj = Trajectory.load(args.trajectory)
    camera = _camera_for(args)
    os.makedirs(args.out, exist_ok=True)
    for k in range(traj.n_frames):
        frame = render_frame(
            traj.positions[k].astype(float),
            traj.velocities[k].astype(float),
            traj.colors[k].astype(float),
            camera,
        )
        write_ppm(frame.color, os.path.join(args.out, f"frame_{k:04d}.ppm"))
    print(f"wrote {traj.n_frames} frames to {args.out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    traj = Trajectory.load(args.trajectory)
    if traj.n_frames < 2:
        print("metrics require at least 2 frames", file=sys.stderr)
        return EXIT_VALIDATION
    camera = _camera_for(args)
    flows = flow_from_snapshots(traj, camera)
    print(f"{ecms(flows):.10g}")
    return EXIT_OK


def cmd_validate(args) -> int:
    scene = parse_scene_file(args.scene)
    n = sum(s.count for s in scene.sources)
    print(f"scene '{scene.name or args.scene}' valid: {n} particles, "
          f"{scene.stepping.frames} frames")
    return EXIT_OK


def cmd_prompt(args) -> int:
    if not args.prompt.strip():
        print("prompt must be non-empty", file=sys.stderr)
        return EXIT_VALIDATION
    print(build_prompt(InitRequest(prompt=args.prompt, image_path=args.image)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mphys", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scene_required=True):
        p.add_argument("--scene", required=scene_required, help="scene JSON path")
        p.add_argument("--seed", type=int, default=None, help="override scene seed")
        p.add_argument("--deterministic", action="store_true",
                       help="force fully deterministic execution")
        p.add_argument("--threads", type=int, default=1,
                       help="worker thread bound (independent simulations only)")

    p = sub.add_parser("simulate", help="run a scene, write trajectory + summary")
    common(p)
    p.add_argument("--material", help="material JSON overriding every group")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("estimate", help="initialize from a prompt, refine against a reference")
    common(p)
    p.add_argument("--prompt", required=True, help="textual simulation prompt")
    p.add_argument("--image", default=None, help="optional reference image path")
    p.add_argument("--reference", required=True, help="reference trajectory path")
    p.add_argument("--backend", choices=("mock", "replay", "http"), default="mock")
    p.add_argument("--transcript", default=None, help="transcript file for replay backend")
    p.add_argument("--max-iterations", type=int, default=40)
    p.add_argument("--m-boost", type=int, default=8)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("render", help="render a trajectory to PPM frames")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--scene", default=None, help="scene JSON supplying the camera")
    p.add_argument("--format", choices=("ppm",), default="ppm")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("metrics", help="print a motion metric for a trajectory")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--scene", default=None, help="scene JSON supplying the camera")
    p.add_argument("--metric", choices=("ecms",), default="ecms")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("validate", help="parse and validate a scene file")
    p.add_argument("--scene", required=True)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("prompt", help="print the rendered initialization prompt")
    p.add_argument("--prompt", required=True)
    p.add_argument("--image", default=None)
    p.set_defaults(fn=cmd_prompt)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Unstable as exc:
        print(f"unstable: {exc} (frame {exc.frame}, substep {exc.substep})",
              file=sys.stderr)
        return EXIT_UNSTABLE
    except (InitFailed, BackendUnavailable) as exc:
        print(f"initialization failed: {exc}", file=sys.stderr)
        return EXIT_INIT
    except (ParseError, ValidationError, MphysError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
