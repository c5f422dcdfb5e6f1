"""Command line entry point: ``lidarcal <subcommand> ...``.

Exit status is 0 on success, 1 on a usage error and 2 on a data error
(missing or malformed input files, failed fits).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .extrinsic import calibrate_iou, calibrate_pnp
from .geom import RigidTransform3
from .intrinsic import MODELS, calibrate_rings, placement_from_planes, plane_from_pose
from .shapeopt import NOMINAL_SQUARE, ShapeScoreConfig, normalize_shape, optimize_shape, robust_score
from .simlidar import LidarSpec, read_scan_csv
from .targets import PolygonTarget, resolve_shape


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{p}: invalid JSON ({exc})") from None


def _emit(data, out):
    text = json.dumps(data, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _cmd_simulate(a):
    cfg = _read_json(a.config) if a.config else {}
    if cfg.get("layout") == "intrinsic":
        spec = LidarSpec.from_dict(cfg.get("lidar_spec", {}))
        scenes = [harness.intrinsic_scene(spec, cfg.get("distance", 4.0), cfg.get("d", 1.0),
                                          cfg.get("shape_ref", "square"), a.seed)]
    else:
        cfg.pop("layout", None)
        scenes = harness.simulate_suite(cfg, seed=a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        harness.save_scene(s, out / f"{s.name}.json")
    print(f"wrote {len(scenes)} scenes to {out}")


def _cmd_fit_vertices(a):
    if not Path(a.scan).exists():
        raise FileNotFoundError(f"scan file not found: {a.scan}")
    scan = read_scan_csv(a.scan)
    target = resolve_shape(a.shape, a.d, a.epsilon)
    est = harness.fit_vertices(scan, target, a.method, a.seed, a.restarts)
    data = {"method": a.method, "vertices": est.vertices.tolist(), "n_points": len(scan)}
    if est.pose is not None:
        data["pose"] = est.pose.to_dict()
    _emit(data, a.out)


def _scene_vertices(scene, path, seed, restarts):
    if path:
        data = _read_json(path)
        groups = data["vertices"] if isinstance(data, dict) else data
        if len(groups) != len(scene.targets):
            raise ValueError(f"{path}: need one vertex group per target ({len(scene.targets)})")
        return [harness.VertexEstimate(np.asarray(g, dtype=float), None, "file") for g in groups]
    return harness.fit_scene(scene, "gl1", seed, 0, restarts)


def _cmd_calibrate(a):
    scene = harness.load_scene(a.scene)
    ests = _scene_vertices(scene, a.vertices, a.seed, a.restarts)
    if a.init:
        init = RigidTransform3.from_dict(_read_json(a.init))
    else:
        init = scene.extrinsic_init if scene.extrinsic_init is not None else scene.extrinsic_gt
    V, C = harness._ordered_pairs(scene, ests, init)
    if a.method == "pnp":
        H, info = calibrate_pnp(np.vstack(V), np.vstack(C), scene.camera, init, return_info=True)
    else:
        H, info = calibrate_iou(V, C, scene.camera, init, return_info=True)
    proj = harness.project_points(np.vstack(V), H, scene.camera)
    e_t, e_r = harness.pose_error(H, scene.extrinsic_gt)
    _emit({"method": a.method, "extrinsic": H.to_dict(), "pixel_rms": harness.pixel_rms(proj, np.vstack(C)),
           "error_vs_truth": {"e_t": e_t, "e_r_deg": e_r}, "info": info}, a.out)


def _cmd_intrinsic(a):
    scenes = harness.load_scenes(a.scenes)
    scans, planes, shapes = [], [], []
    for s in scenes:
        if not s.scans:
            raise ValueError(f"{s.name}: scene has no scans")
        scans.extend(s.scans)
        planes.extend(plane_from_pose(t.pose) for t in s.targets)
        shapes.extend(t.resolve() for t in s.targets)
    if a.truth_planes:
        res = calibrate_rings(scans, a.model, planes=planes, max_outer=a.max_outer)
    else:
        init = [t.pose.inverse() for s in scenes for t in s.targets]
        res = calibrate_rings(scans, a.model, targets=shapes, init_poses=init, max_outer=a.max_outer,
                              random_state=a.seed)
    _emit(res.to_dict(), a.out)
    print(f"{'ring':>5} {'before':>12} {'after':>12}", file=sys.stderr)
    for r in sorted(res.params):
        print(f"{r:>5} {res.cost_before[r]:>12.6f} {res.cost_after[r]:>12.6f}", file=sys.stderr)


def _cmd_optimize_shape(a):
    cfg = ShapeScoreConfig.from_dict(_read_json(a.config)) if a.config else ShapeScoreConfig()
    cand = optimize_shape(cfg, seed=a.seed, restarts=a.restarts)
    square = robust_score(normalize_shape(NOMINAL_SQUARE), cfg)
    data = {
        "vertices": cand.vertices.tolist(),
        "epsilon": a.epsilon,
        "params": cand.params.tolist(),
        "robust_score": robust_score(cand.vertices, cfg),
        "square_robust_score": square,
    }
    PolygonTarget(cand.vertices, a.epsilon)  # validates convexity
    _emit(data, a.out)


def _cmd_check_placement(a):
    scene = harness.load_scene(a.scene)
    if len(scene.targets) < 4:
        raise ValueError(f"{a.scene}: placement check needs four targets, scene has {len(scene.targets)}")
    pm = placement_from_planes([plane_from_pose(t.pose) for t in scene.targets])
    _emit(pm.to_dict(), a.out)


def _cmd_evaluate(a):
    scenes = harness.load_scenes(a.scenes)
    rep = harness.round_robin(scenes, a.fit, a.calib, seed=a.seed, restarts=a.restarts)
    if a.out:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        rep.write_json(out / f"report_{a.fit}_{a.calib}.json")
        rep.write_csv(out / f"report_{a.fit}_{a.calib}.csv")
    print(json.dumps(rep.to_dict() if not a.out else rep.summary(), indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lidarcal", description="Target-based LiDAR and LiDAR-camera calibration")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a suite of scenes")
    s.add_argument("--config", help="suite configuration JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_simulate)

    s = sub.add_parser("fit-vertices", help="estimate target vertices from one scan")
    s.add_argument("--method", choices=harness.FIT_METHODS, default="gl1")
    s.add_argument("--scan", required=True)
    s.add_argument("--shape", default="diamond", help="diamond, square, optimal or a shape JSON file")
    s.add_argument("--d", type=float, default=None, help="side length (or sqrt of area)")
    s.add_argument("--epsilon", type=float, default=None)
    s.add_argument("--restarts", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_fit_vertices)

    s = sub.add_parser("calibrate", help="LiDAR-camera extrinsic from one scene")
    s.add_argument("--method", choices=harness.CALIB_METHODS, default="pnp")
    s.add_argument("--scene", required=True)
    s.add_argument("--vertices", help="JSON with one vertex group per target; fitted with gl1 if omitted")
    s.add_argument("--init", help="JSON rigid transform used as the initial extrinsic")
    s.add_argument("--restarts", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_calibrate)

    s = sub.add_parser("intrinsic", help="per-ring intrinsic LiDAR calibration")
    s.add_argument("--model", choices=MODELS, default="sim3")
    s.add_argument("--scenes", nargs="+", required=True)
    s.add_argument("--truth-planes", action="store_true", help="use the scene's true target planes")
    s.add_argument("--max-outer", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_intrinsic)

    s = sub.add_parser("optimize-shape", help="search for a sensitivity-robust target shape")
    s.add_argument("--config", help="score configuration JSON")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--restarts", type=int, default=4)
    s.add_argument("--epsilon", type=float, default=0.035)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_optimize_shape)

    s = sub.add_parser("check-placement", help="rank and conditioning of a 4-target arrangement")
    s.add_argument("--scene", required=True)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_check_placement)

    s = sub.add_parser("evaluate", help="round-robin cross validation over scenes")
    s.add_argument("--scenes", nargs="+", required=True, help="scene files or directories")
    s.add_argument("--fit", choices=harness.FIT_METHODS, default="gl1")
    s.add_argument("--calib", choices=harness.CALIB_METHODS, default="pnp")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--restarts", type=int, default=8)
    s.add_argument("--out", help="directory for report JSON and CSV")
    s.set_defaults(func=_cmd_evaluate)
    return p


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        args.func(args)
    except (FileNotFoundError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"lidarcal: error: {msg}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
