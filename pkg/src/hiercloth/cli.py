"""Command-line entry point.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path

from .assets import load_obj, save_frame
from .energy import TERMS

log = logging.getLogger("hiercloth")

METRIC_COLUMNS = ["step", *TERMS, "total", "grad_norm", "penetration_fraction"]


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hiercloth", description="Cloth simulation and self-supervised training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, *flags):
        sp = sub.add_parser(name, help=help_)
        for f in flags:
            f(sp)
        return sp

    config = lambda sp: sp.add_argument("--config", help="scene JSON or built-in scene name (drape, toy, strip)")
    seed = lambda sp: sp.add_argument("--seed", type=int, help="random seed (default 0)")
    out = lambda sp: sp.add_argument("--out", help="output file or directory")
    steps = lambda sp: sp.add_argument("--steps", type=int)
    schedule = lambda sp: sp.add_argument("--schedule", help="schedule JSON, or 'default' / 'fineN'")
    checkpoint = lambda sp: sp.add_argument("--checkpoint")

    sp = add("coarsen", "build the level hierarchy of a garment and write it as JSON", config, seed, out)
    sp.add_argument("--levels", type=int, default=2, help="number of coarse levels")
    add("radius", "print the propagation radius of a schedule", schedule)
    sp = add("check-grad", "finite-difference check of every energy term", seed)
    sp.add_argument("--configs", type=int, default=20)
    sp = add("relax", "relax the garment to a static rest pose and write it as OBJ", config, out, steps)
    sp.add_argument("--no-gravity", action="store_true")
    add("simulate", "run the optimisation-based simulator", config, out, steps, seed)
    add("train", "train a model from a training JSON", config, out, seed, checkpoint, steps)
    add("rollout", "autoregressive network rollout", config, out, steps, checkpoint, seed)
    sp = add("evaluate", "per-term table for checkpoints over scenes", config, out, steps, checkpoint, seed)
    sp.add_argument("--simulator", action="store_true", help="also evaluate the baseline simulator")
    sp = add("metrics", "collision metrics for a directory of frames", config, out)
    sp.add_argument("frames", help="directory holding frame_%%05d.obj files")
    return p


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _scene(args):
    from .scenes import SCENES, load_scene

    _require(args, "config")
    if args.config in SCENES:
        return SCENES[args.config]()
    if not Path(args.config).exists():
        raise UsageError(f"config {args.config} does not exist")
    return load_scene(args.config)


def _write_frames(out_dir: Path, frames, faces):
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, x in enumerate(frames):
        save_frame(x, faces, out_dir / f"frame_{i:05d}.obj")


def _write_metrics(path: Path, traj):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for n, bd in enumerate(traj.log):
            row = bd.to_row()
            w.writerow([n + 1, *(repr(float(row[t])) for t in TERMS), repr(float(row["total"])),
                        repr(float(row["grad_norm"])), repr(float(traj.penetration[n]))])


def cmd_coarsen(args):
    from .graph import build_garment_graph, build_hierarchy

    scene = _scene(args)
    h = build_hierarchy(build_garment_graph(scene.garment, scene.pinned), args.levels, seed=_seed(args))
    doc = json.dumps(h.to_dict())
    if args.out:
        Path(args.out).write_text(doc)
    else:
        print(doc)
    return 0


def cmd_radius(args):
    from .graph import propagation_radius
    from .train import resolve_schedule

    _require(args, "schedule")
    if not re.fullmatch(r"default|fine\d+", args.schedule) and not Path(args.schedule).exists():
        raise UsageError(f"schedule {args.schedule} does not exist")
    print(propagation_radius(resolve_schedule(args.schedule)))
    return 0


def cmd_check_grad(args):
    from .gradcheck import check_energy_gradients

    worst = check_energy_gradients(seed=_seed(args), configs=args.configs)
    ok = True
    print(f"{'term':<12} {'max_rel_err':>12}  status")
    for name, err in worst.items():
        passed = err < 1e-4
        ok &= passed
        print(f"{name:<12} {err:12.3e}  {'pass' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_relax(args):
    from .sim import OptimizerConfig, relax_rest_pose

    scene = _scene(args)
    _require(args, "out")
    opt = OptimizerConfig(max_iter=args.steps or 2000, tol=1e-8)
    body = scene.body_positions(0)
    rest = relax_rest_pose(scene.garment.positions, scene.rest, scene.material(), body,
                           scene.body.faces if scene.body is not None else None, opt,
                           gravity=(0.0, 0.0, 0.0) if args.no_gravity else scene.config.gravity,
                           collision_eps=scene.config.collision_eps,
                           collision_stiffness=scene.config.collision_stiffness)
    save_frame(rest.rest_positions, rest.faces, args.out)
    return 0


def cmd_simulate(args):
    from .sim import rollout

    scene = _scene(args)
    _require(args, "out", "steps")
    traj = rollout(scene, args.steps)
    out = Path(args.out)
    _write_frames(out, traj.frames, scene.garment.faces)
    _write_metrics(out / "metrics.csv", traj)
    return 0


def cmd_train(args):
    from .train import TrainConfig, train

    _require(args, "config")
    if not Path(args.config).exists():
        raise UsageError(f"config {args.config} does not exist")
    d = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out:
        d["out_dir"] = args.out
    if args.steps is not None:
        d["iterations"] = args.steps
    d.setdefault("out_dir", "runs/train")
    result = train(TrainConfig.from_dict(d), resume=args.checkpoint)
    print(result.checkpoint)
    return 0


def _load_model(path):
    from .net import ClothNet

    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")
    return ClothNet.load(path)[0]


def cmd_rollout(args):
    from .train import network_rollout

    scene = _scene(args)
    _require(args, "checkpoint", "out", "steps")
    model = _load_model(args.checkpoint)
    traj = network_rollout(model, scene, args.steps, seed=_seed(args))
    out = Path(args.out)
    _write_frames(out, traj.frames, scene.garment.faces)
    _write_metrics(out / "metrics.csv", traj)
    return 0


def cmd_evaluate(args):
    from .train import EVAL_COLUMNS, evaluate

    _require(args, "checkpoint", "config", "out")
    models = {}
    for path in args.checkpoint.split(","):
        label = Path(path).stem if Path(path).stem not in models else path
        models[label] = _load_model(path)
    scenes = [_scene(argparse.Namespace(config=c)) for c in args.config.split(",")]
    rows = evaluate(models, scenes, args.steps or 30, args.out, include_simulator=args.simulator)
    print(",".join(EVAL_COLUMNS))
    for r in rows:
        print(",".join(str(r[c]) for c in EVAL_COLUMNS))
    return 0


def _frame_index(p: Path) -> int:
    return int(re.fullmatch(r"frame_(\d+)\.obj", p.name).group(1))


def cmd_metrics(args):
    from .sim import collision_metrics

    scene = _scene(args)
    if scene.body is None:
        raise UsageError("scene has no body")
    d = Path(args.frames)
    files = sorted((p for p in d.glob("frame_*.obj") if re.fullmatch(r"frame_\d+\.obj", p.name)), key=_frame_index)
    if not files:
        raise UsageError(f"no frame_*.obj files in {d}")
    frames = [load_obj(p).positions for p in files]
    bodies = [scene.body_positions(_frame_index(p)) for p in files]
    pen, frac = collision_metrics(frames, bodies, scene.body.faces, scene.config.collision_eps)
    text = f"collision_metric,penetration_fraction\n{pen!r},{frac!r}\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


COMMANDS = {
    "coarsen": cmd_coarsen, "radius": cmd_radius, "check-grad": cmd_check_grad, "relax": cmd_relax,
    "simulate": cmd_simulate, "train": cmd_train, "rollout": cmd_rollout, "evaluate": cmd_evaluate,
    "metrics": cmd_metrics,
}


def run(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 1
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
