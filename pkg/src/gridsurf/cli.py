"""Command line entry points.

Subcommands:
  synth         render a synthetic RGB-D dataset to a directory
  reconstruct   optimize a model against a dataset, writing checkpoints
  extract-mesh  decode a checkpoint's SDF zero level set to a mesh
  cull          remove mesh faces no input frame observed
  eval          compare a predicted mesh against ground truth
  gradcheck     finite-difference verification of all derivatives

Exit codes: 0 success, 1 usage error, 2 runtime failure,
3 gradcheck tolerance failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import camera
from . import config as cfgmod
from . import gradcheck as gc
from . import mesher
from . import scenegen
from . import seeds
from .checkpoint import CheckpointError
from .decoders import InitError
from .mesher import EmptyLevelSetError
from .optimizer import DivergenceError, load_model, train

log = logging.getLogger("gridsurf")

_RUNTIME_ERRORS = (
    cfgmod.ConfigError, CheckpointError, InitError, DivergenceError,
    EmptyLevelSetError, OSError, ValueError, KeyError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _floats(text, n, what):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != n:
        raise ValueError(f"{what}: expected {n} comma-separated numbers")
    return [float(p) for p in parts]


def build_parser():
    p = _Parser(prog="gridsurf", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seed", type=int, default=None, help="master RNG seed")
    p.add_argument("--config", default=None,
                   help="key=value config file (default: $GRIDSURF_CONFIG)")
    p.add_argument("--precision", choices=("single", "double"), default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="render a synthetic RGB-D dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--scene", choices=("sphere-in-box", "thin-slab"),
                    default="sphere-in-box")
    sp.add_argument("--frames", type=int, default=40)
    sp.add_argument("--width", type=int, default=160)
    sp.add_argument("--height", type=int, default=120)
    sp.add_argument("--fov", type=float, default=70.0, help="horizontal, degrees")
    sp.add_argument("--orbit-radius", type=float, default=0.6)
    sp.add_argument("--orbit-height", type=float, default=0.18)
    sp.add_argument("--orbit-height-amp", type=float, default=0.14)
    sp.add_argument("--target", default=None, metavar="X,Y,Z",
                    help="look-at point (default: scene-appropriate)")
    sp.add_argument("--noise", type=float, default=0.0,
                    help="depth noise sigma at 1 m (scales with z^2)")
    sp.add_argument("--dropout-rect", default=None, metavar="X0,Y0,X1,Y1",
                    help="zero depth inside this pixel rectangle")
    sp.add_argument("--dropout-ball", default=None, metavar="CX,CY,CZ,R",
                    help="zero depth where the surface enters this ball")
    sp.add_argument("--dropout-box", default=None, metavar="X0,Y0,Z0,X1,Y1,Z1",
                    help="zero depth where the surface enters this world box")
    sp.add_argument("--max-depth", type=float, default=8.0)

    rp = sub.add_parser("reconstruct", help="fit a model to a dataset")
    rp.add_argument("--data", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--iterations", type=int, default=None)
    rp.add_argument("--refine-poses", action="store_true")
    rp.add_argument("--perturb-poses", default=None, metavar="TRANS_M,ROT_DEG",
                    help="corrupt input poses (frame 0 kept exact)")
    rp.add_argument("--resume", default=None, help="checkpoint to continue from")

    ep = sub.add_parser("extract-mesh", help="mesh a checkpoint's zero level set")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--out", required=True, help=".ply or .obj path")
    ep.add_argument("--resolution", type=float, default=0.01)
    ep.add_argument("--cull", action="store_true",
                    help="also remove unobserved faces (needs --data)")
    ep.add_argument("--data", default=None)
    ep.add_argument("--ascii", action="store_true", help="write ascii PLY")

    cp = sub.add_parser("cull", help="drop mesh faces unseen by a dataset")
    cp.add_argument("--mesh", required=True)
    cp.add_argument("--data", required=True)
    cp.add_argument("--out", required=True)
    cp.add_argument("--thin", action="store_true",
                    help="keep faces at pixels with invalid depth")
    cp.add_argument("--ascii", action="store_true")

    vp = sub.add_parser("eval", help="mesh-vs-mesh reconstruction metrics")
    vp.add_argument("--pred", required=True)
    vp.add_argument("--gt", required=True)
    vp.add_argument("--threshold", type=float, default=0.05)
    vp.add_argument("--json", default=None, help="also write metrics JSON here")

    gp = sub.add_parser("gradcheck", help="verify derivatives against finite differences")
    gp.add_argument("--cases", type=int, default=30, help="first-order cases per op")
    gp.add_argument("--second-cases", type=int, default=8)
    return p


def _config_dict(args):
    path = args.config or os.environ.get("GRIDSURF_CONFIG")
    cfg = cfgmod.load_config(path) if path else {}
    cfg = cfgmod.apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.precision is not None:
        cfg["precision"] = args.precision
    return cfg


def _cmd_synth(args):
    fx = 0.5 * args.width / np.tan(np.radians(args.fov) / 2)
    intr = camera.Intrinsics(fx=fx, fy=fx, cx=args.width / 2.0,
                             cy=args.height / 2.0,
                             width=args.width, height=args.height)
    if args.scene == "sphere-in-box":
        scene = scenegen.sphere_in_box()
        target = (0.0, 0.0, -0.45)
    else:
        scene = scenegen.thin_slab()
        target = (0.0, 0.0, 0.0)
    if args.target:
        target = tuple(_floats(args.target, 3, "--target"))
    traj = scenegen.orbit_trajectory(args.frames, target=target,
                                     radius=args.orbit_radius,
                                     height=args.orbit_height,
                                     height_amp=args.orbit_height_amp)
    rect = None
    if args.dropout_rect:
        rect = tuple(int(v) for v in _floats(args.dropout_rect, 4, "--dropout-rect"))
    ball = None
    if args.dropout_ball:
        vals = _floats(args.dropout_ball, 4, "--dropout-ball")
        ball = (np.asarray(vals[:3]), vals[3])
    box = None
    if args.dropout_box:
        vals = _floats(args.dropout_box, 6, "--dropout-box")
        box = (np.asarray(vals[:3]), np.asarray(vals[3:]))
    seed = args.seed if args.seed is not None else 0
    scenegen.render_dataset(scene, traj, intr, out_dir=args.out,
                            max_t=args.max_depth, noise_sigma0=args.noise,
                            dropout_rect=rect, dropout_world=ball,
                            dropout_box=box, seed=seed, threads=args.threads)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def _cmd_reconstruct(args):
    cfg = _config_dict(args)
    if args.iterations is not None:
        cfg["iterations"] = args.iterations
    if args.refine_poses:
        cfg["refine_poses"] = True
    tc = cfgmod.to_train_config(cfg)
    dataset = scenegen.load_dataset(args.data)
    initial = None
    if args.perturb_poses:
        trans, rot = _floats(args.perturb_poses, 2, "--perturb-poses")
        rng = seeds.substream(tc.seed, seeds.POSE_PERTURB)
        initial = dataset.poses.copy()
        for f in range(1, len(dataset)):
            initial[f] = camera.perturb_pose(dataset.poses[f], trans, rot, rng)
        os.makedirs(args.out, exist_ok=True)
        camera.save_poses(os.path.join(args.out, "poses_in.txt"), initial)
        dt, dr = camera.pose_errors(initial[1:], dataset.poses[1:])
        print(f"input pose error: {dt * 100:.3f} cm / {dr:.4f} deg")
    model, final = train(dataset, tc, args.out, initial_poses=initial,
                         resume=args.resume)
    if tc.refine_poses:
        est = model.pose_matrices()
        camera.save_poses(os.path.join(args.out, "poses_out.txt"), est)
        dt, dr = camera.pose_errors(est[1:], dataset.poses[1:])
        print(f"final pose error: {dt * 100:.3f} cm / {dr:.4f} deg")
    print(f"final checkpoint: {final}")
    return 0


def _cmd_extract(args):
    model, _, _, _ = load_model(args.checkpoint)
    mesh = mesher.extract_mesh(model, resolution=args.resolution,
                               threads=args.threads)
    if args.cull:
        if not args.data:
            raise ValueError("--cull needs --data")
        dataset = scenegen.load_dataset(args.data)
        mesh = mesher.cull_mesh(mesh, dataset, threads=args.threads)
    mesher.save_mesh(args.out, mesh, binary=not args.ascii)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {args.out}")
    return 0


def _cmd_cull(args):
    mesh = mesher.load_mesh(args.mesh)
    dataset = scenegen.load_dataset(args.data)
    out = mesher.cull_mesh(mesh, dataset, thin_mode=args.thin,
                           threads=args.threads)
    mesher.save_mesh(args.out, out, binary=not args.ascii)
    print(f"kept {len(out.faces)} of {len(mesh.faces)} faces -> {args.out}")
    return 0


def _cmd_eval(args):
    pred = mesher.load_mesh(args.pred)
    gt = mesher.load_mesh(args.gt)
    rep = mesher.evaluate(pred, gt, threshold=args.threshold)
    print(rep.table())
    if args.json:
        with open(args.json, "w") as f:
            f.write(rep.to_json() + "\n")
    return 0


def _cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else 0
    results = gc.run_all(seed, cases_per_op=args.cases,
                         second_order_cases=args.second_cases)
    text, ok = gc.report(results)
    print(text)
    return 0 if ok else 3


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "synth": _cmd_synth,
        "reconstruct": _cmd_reconstruct,
        "extract-mesh": _cmd_extract,
        "cull": _cmd_cull,
        "eval": _cmd_eval,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except _RUNTIME_ERRORS as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
