"""Command-line interface: train, merge, infer, selftrain, simulate-views, synth."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .geometry import Pose
from .hand import HandModel, default_hand
from .pipeline import VARIANTS, compression_ratio, infer, load_scene_set, merge, read_demos, selftrain, train, write_demo
from .store import ModelStore, Params
from .surface import Camera, Scene, read_ply, simulate_depth_view, write_ply

log = logging.getLogger("viewgrasp")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_params(path=None, overrides=(), base: Params | None = None) -> Params:
    """Parameters from defaults (or ``base``), an optional JSON file, then KEY=VALUE overrides."""
    d = (base or Params()).to_dict()
    if path:
        d.update(json.loads(Path(path).read_text()))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"parameter override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        d[k.strip()] = _parse_value(v.strip())
    return Params.from_dict(d)


def parse_pose(text: str) -> Pose:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 7:
        raise ValueError("pose needs 7 numbers: x y z qx qy qz qw")
    return Pose.from_list(vals)


def _add_param_args(p):
    p.add_argument("--params", help="JSON file of parameter values")
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE", help="override one parameter")


def cmd_train(args) -> int:
    hand = HandModel.load(args.hand) if args.hand else default_hand()
    params = load_params(args.params, args.param)
    demos = read_demos(args.demos)
    store = train(demos, hand, params, view_based=not args.registered)
    store.save(args.out)
    print(f"trained on {len(demos)} demonstrations: {len(store.models)} contact models, {len(store.retained)} retained -> {args.out}")
    return 0


def cmd_merge(args) -> int:
    store = ModelStore.load(args.store)
    merge(store, enabled=not args.no_merge)
    out = args.out or args.store
    store.save(out)
    print(f"{len(store.retained)} contact models -> {len(store.clusters)} prototypes (compression {compression_ratio(store):.2f}) -> {out}")
    return 0


def cmd_infer(args) -> int:
    store = ModelStore.load(args.store)
    params = load_params(args.params, args.param, base=store.params)
    cloud = read_ply(args.cloud)
    if VARIANTS[args.variant][2] and not store.merged:
        merge(store, True)
    rep = infer(store, cloud, args.variant, args.seed, params)
    rep.write_jsonl(args.out, args.top)
    for k, v in rep.timings.items():
        print(f"{k}: {v:.2f} s")
    if rep.solutions:
        print(f"best normalised log-score {rep.solutions[0].log_score:.4f}; {len(rep.solutions)} grasps -> {args.out}")
    return 0


def cmd_selftrain(args) -> int:
    store = ModelStore.load(args.store)
    params = load_params(args.params, args.param, base=store.params)
    scenes = load_scene_set(args.scenes)
    out, rep = selftrain(store, scenes, args.rounds, args.variant, args.seed, params)
    for r in rep.rounds:
        wins = [o["scene"] for o in r["outcomes"] if o["success"]]
        print(f"round {r['round']}: {r['new_successes']} new successes {wins}")
    if rep.added:
        out.save(args.out or args.store)
        print(f"added {rep.added} grasps -> {args.out or args.store}")
    else:
        print("no new successes; store unchanged")
    return 0


def cmd_simulate(args) -> int:
    scene = Scene.load(args.scene)
    cam = Camera(parse_pose(args.camera), args.width, args.height, args.fov)
    rng = np.random.default_rng(args.seed)
    cloud = simulate_depth_view(scene, cam, args.noise, rng)
    write_ply(args.out, cloud)
    print(f"{len(cloud)} points -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    """Write a box-pinch demonstration set, a hand file and a test scene set."""
    from . import synthetic

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    default_hand().save(out / "hand.json")
    rng = np.random.default_rng(args.seed)
    for k in range(args.demos):
        yaw = 0.0 if k == 0 else rng.uniform(-np.pi, np.pi)
        demo, _ = synthetic.box_pinch_demo(f"g{k}", azimuths=(np.pi / 2, -np.pi / 2) if args.two_views else (np.pi / 2,), yaw=yaw)
        write_demo(demo, out / "demos" / f"g{k}")
    scenes = out / "scenes"
    scenes.mkdir(exist_ok=True)
    for scene, cam in synthetic.scene_suite(args.scenes, args.seed):
        d = scene.to_dict()
        d["camera"] = {"pose": cam.pose.to_list(), "width": cam.width, "height": cam.height, "fov_deg": cam.fov_deg}
        (scenes / f"{scene.name}.json").write_text(json.dumps(d, indent=2))
        write_ply(scenes / f"{scene.name}.ply", simulate_depth_view(scene, cam))
    print(f"wrote {args.demos} demonstrations and {args.scenes} scenes under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="viewgrasp", description="Learn and transfer dexterous grasps from depth views.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="learn contact and hand-configuration models")
    p.add_argument("--demos", required=True, help="demonstration directory")
    p.add_argument("--hand", help="hand description (JSON); default three-finger hand")
    p.add_argument("--out", required=True, help="model store to write")
    p.add_argument("--registered", action="store_true", help="train on the registered cloud of all views (variant A1)")
    _add_param_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="cluster contact models into prototypes")
    p.add_argument("--store", required=True)
    p.add_argument("--no-merge", action="store_true", help="one singleton prototype per contact model")
    p.add_argument("--out", help="write here instead of updating the store in place")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("infer", help="generate ranked grasps for a test cloud")
    p.add_argument("--store", required=True)
    p.add_argument("--cloud", required=True, help="test view (PLY)")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="A4")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report (JSON lines)")
    p.add_argument("--top", type=int, default=None, help="keep only the best N grasps")
    _add_param_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("selftrain", help="autonomous training on a scene set")
    p.add_argument("--store", required=True)
    p.add_argument("--scenes", required=True, help="directory of scene JSON files with camera poses")
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--variant", choices=sorted(VARIANTS), default="A4")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write here instead of updating the store in place")
    _add_param_args(p)
    p.set_defaults(func=cmd_selftrain)

    p = sub.add_parser("simulate-views", help="ray-cast a depth view of a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True, help="camera pose 'x,y,z,qx,qy,qz,qw' (+z looks forward); use --camera=... when it starts with '-'")
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float, default=0.0, help="depth noise std (m)")
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--fov", type=float, default=45.0, help="horizontal field of view (degrees)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("synth", help="write synthetic box-pinch demonstrations and test scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--demos", type=int, default=1)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--two-views", action="store_true", help="record each demonstration from both sides")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
