"""Metrics, synthetic scene suites, scene files and round-robin evaluation.

A scene holds a few posed targets, their LiDAR returns, the camera model, the
true LiDAR-to-camera extrinsic and the image corners of every target. The
round-robin study calibrates on one scene (or a combination of scenes) and
validates the extrinsic on every other scene.
"""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np

from .baseline import RansacParams, baseline_vertices
from .camera import CameraIntrinsics, project_points, sort_correspondences
from .extrinsic import calibrate_iou, calibrate_pnp
from .geom import RigidTransform3, euler_xyz_to_rotation, rotation_to_euler_xyz, so3_exp, so3_log
from .simlidar import LidarSpec, Scan, read_scan_csv, simulate_scan, write_scan_csv
from .targets import PolygonTarget, resolve_shape
from .vertexfit import L1Params, extract_edge_points, fit_target_l1, fit_template_p2l

FIT_METHODS = ("gl1", "template", "rn")
CALIB_METHODS = ("pnp", "iou")
_MASK64 = (1 << 64) - 1


class SceneError(ValueError):
    """A scene file or scene object is malformed."""


# --------------------------------------------------------------------------- metrics


def vertex_rmse(estimated, truth) -> float:
    """Root mean square distance between corresponding vertices."""
    A = np.asarray(estimated, dtype=float).reshape(-1, 3)
    B = np.asarray(truth, dtype=float).reshape(-1, 3)
    if A.shape != B.shape:
        raise ValueError(f"vertex counts differ: {len(A)} vs {len(B)}")
    return float(np.sqrt(np.mean(np.sum((A - B) ** 2, axis=1))))


def pose_error(estimate: RigidTransform3, truth: RigidTransform3) -> tuple[float, float]:
    """Translation error (m) and rotation error (deg) between two transforms."""
    e_t = float(np.linalg.norm(truth.translation - estimate.translation))
    e_r = float(np.rad2deg(np.linalg.norm(so3_log(truth.rotation @ estimate.rotation.T))))
    return e_t, e_r


def pixel_rms(projected, corners) -> float:
    """Pixel error per corner."""
    A = np.asarray(projected, dtype=float).reshape(-1, 2)
    B = np.asarray(corners, dtype=float).reshape(-1, 2)
    if A.shape != B.shape:
        raise ValueError(f"point counts differ: {len(A)} vs {len(B)}")
    return float(np.sqrt(np.mean(np.sum((A - B) ** 2, axis=1))))


def match_vertices(estimated, truth) -> np.ndarray:
    """Reorder ``estimated`` to the permutation closest to ``truth``."""
    A = np.asarray(estimated, dtype=float).reshape(-1, 3)
    B = np.asarray(truth, dtype=float).reshape(-1, 3)
    if A.shape != B.shape:
        raise ValueError(f"vertex counts differ: {len(A)} vs {len(B)}")
    best = min(permutations(range(len(A))), key=lambda p: np.sum((A[list(p)] - B) ** 2))
    return A[list(best)]


def symmetry_angles(target: PolygonTarget, tol: float = 1e-9) -> list[float]:
    """In-plane rotation angles that map the target polygon onto itself."""
    V = target.vertices
    out = []
    n = len(V)
    for k in range(n):
        a = np.arctan2(V[k, 1], V[k, 0]) - np.arctan2(V[0, 1], V[0, 0])
        c, s = np.cos(a), np.sin(a)
        W = V @ np.array([[c, s], [-s, c]])
        if all(np.min(np.linalg.norm(V - w, axis=1)) < tol * max(1.0, np.abs(V).max()) for w in W):
            out.append(float(a))
    return out or [0.0]


def target_pose_error(estimate: RigidTransform3, truth: RigidTransform3,
                      target: PolygonTarget) -> tuple[float, float]:
    """Pose error up to the target's own rotational symmetry."""
    best = None
    for a in symmetry_angles(target):
        alt = RigidTransform3(estimate.rotation @ so3_exp([a, 0.0, 0.0]), estimate.translation)
        err = pose_error(alt, truth)
        if best is None or err[1] < best[1]:
            best = err
    return best


# --------------------------------------------------------------------------- seeds


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *keys: int) -> int:
    """32-bit child seed: fold each key into the state with one splitmix64 step."""
    s = splitmix64(int(master) & _MASK64)
    for k in keys:
        s = splitmix64(s ^ (int(k) & _MASK64))
    return s & 0xFFFFFFFF


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("CALIB_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    workers = n_threads()
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


# --------------------------------------------------------------------------- scenes


@dataclass
class SceneTarget:
    shape_ref: str
    pose: RigidTransform3  # target to LiDAR
    d: float | None = None
    epsilon: float | None = None
    shape: PolygonTarget | None = None

    def resolve(self, base_dir=None) -> PolygonTarget:
        if self.shape is None:
            self.shape = resolve_shape(self.shape_ref, self.d, self.epsilon, base_dir)
        return self.shape

    def vertices(self) -> np.ndarray:
        return self.pose.apply(self.resolve().vertices_3d())


@dataclass
class Scene:
    lidar_spec: LidarSpec
    targets: list
    camera: CameraIntrinsics
    extrinsic_gt: RigidTransform3
    corners: list  # one (m, 2) array per target
    scans: list = field(default_factory=list)  # one Scan per target
    name: str = "scene"
    extrinsic_init: RigidTransform3 | None = None

    def validate(self) -> None:
        if not self.targets:
            raise SceneError(f"{self.name}: scene has no targets")
        if len(self.corners) != len(self.targets):
            raise SceneError(f"{self.name}: need corners for each of the {len(self.targets)} targets")
        for k, (c, t) in enumerate(zip(self.corners, self.targets)):
            m = t.resolve().n_vertices
            if np.asarray(c).shape != (m, 2):
                raise SceneError(f"{self.name}: target {k} needs {m} corners, got shape {np.shape(c)}")
        if self.scans:
            if len(self.scans) != len(self.targets):
                raise SceneError(f"{self.name}: need one scan per target")
            nr = self.lidar_spec.n_rings
            for k, s in enumerate(self.scans):
                if len(s) and (s.rings.min() < 0 or s.rings.max() >= nr):
                    raise SceneError(f"{self.name}: scan {k} has ring ids outside 0..{nr - 1}")


def _pose_to_json(T: RigidTransform3) -> dict:
    return {"euler_xyz_deg": rotation_to_euler_xyz(T.rotation).tolist(), "translation": T.translation.tolist()}


def save_scene(scene: Scene, path) -> Path:
    """Write ``<name>.json`` plus one scan CSV per target next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scan_files = []
    for k, s in enumerate(scene.scans):
        fname = f"{path.stem}_t{k}.csv"
        write_scan_csv(s, path.parent / fname)
        scan_files.append(fname)
    data = {
        "name": scene.name,
        "lidar_spec": scene.lidar_spec.to_dict(),
        "targets": [{"shape_ref": t.shape_ref, "pose": _pose_to_json(t.pose), "d": t.d, "epsilon": t.epsilon}
                    for t in scene.targets],
        "camera": scene.camera.to_dict(),
        "extrinsic_gt": _pose_to_json(scene.extrinsic_gt),
        "corners": [np.asarray(c).tolist() for c in scene.corners],
        "scans": scan_files,
    }
    if scene.extrinsic_init is not None:
        data["extrinsic_init"] = _pose_to_json(scene.extrinsic_init)
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return path


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"scene file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: invalid JSON ({exc})") from None
    try:
        targets = []
        for t in data["targets"]:
            st = SceneTarget(t["shape_ref"], RigidTransform3.from_dict(t["pose"]), t.get("d"), t.get("epsilon"))
            st.resolve(path.parent)
            targets.append(st)
        scans = []
        for k, f in enumerate(data.get("scans", [])):
            p = path.parent / f
            if not p.exists():
                raise FileNotFoundError(f"scan file not found: {p}")
            s = read_scan_csv(p)
            scans.append(Scan(s.points, s.rings, s.intensity, k))
        scene = Scene(
            lidar_spec=LidarSpec.from_dict(data.get("lidar_spec", {})),
            targets=targets,
            camera=CameraIntrinsics.from_dict(data["camera"]),
            extrinsic_gt=RigidTransform3.from_dict(data["extrinsic_gt"]),
            corners=[np.asarray(c, dtype=float) for c in data["corners"]],
            scans=scans,
            name=data.get("name", path.stem),
            extrinsic_init=(RigidTransform3.from_dict(data["extrinsic_init"])
                            if data.get("extrinsic_init") else None),
        )
    except KeyError as exc:
        raise SceneError(f"{path}: missing field {exc}") from None
    except SceneError:
        raise
    except (TypeError, ValueError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise SceneError(f"{path}: {exc}") from None
    try:
        scene.validate()
    except SceneError as exc:
        raise SceneError(f"{path}: {exc}") from None
    return scene


def load_scenes(paths) -> list:
    """Load scene files; directories contribute every ``*.json`` inside, sorted by name."""
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("*.json")))
        else:
            files.append(p)
    if not files:
        raise FileNotFoundError(f"no scene files found in {', '.join(map(str, paths))}")
    return [load_scene(f) for f in files]


# --------------------------------------------------------------------------- simulation


def default_camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=600.0, fy=600.0, cx=640.0, cy=360.0)


def default_extrinsic() -> RigidTransform3:
    """Camera 10 cm ahead of and 20 cm below the LiDAR, looking along LiDAR x."""
    R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    center = np.array([0.10, 0.0, -0.20])
    return RigidTransform3(R, -R @ center)


DEFAULT_SUITE = {
    "n_scenes": 7,
    "targets": [
        {"shape_ref": "diamond", "d": 0.805, "distance": [3.0, 6.0], "azimuth_deg": [4.0, 14.0]},
        {"shape_ref": "diamond", "d": 0.158, "distance": [1.5, 3.0], "azimuth_deg": [-14.0, -4.0]},
    ],
    "elevation_deg": [-2.0, 0.0],
    "yaw_jitter_deg": 20.0,
    "pitch_jitter_deg": 10.0,
    "bias": 0.03,
    "noise_sigma": 0.01,
    "init_rotation_deg": 2.0,
    "init_translation": 0.05,
}


def perturb_transform(T: RigidTransform3, rot_deg: float, trans: float, rng) -> RigidTransform3:
    w = rng.normal(size=3)
    w *= np.deg2rad(rot_deg) / np.linalg.norm(w)
    dt = rng.normal(size=3)
    dt *= trans / np.linalg.norm(dt)
    return RigidTransform3(so3_exp(w) @ T.rotation, T.translation + dt)


def simulate_suite(config: dict | None = None, seed: int = 0) -> list:
    """Simulate ``n_scenes`` scenes sharing one LiDAR (same per-ring bias) and camera."""
    cfg = dict(DEFAULT_SUITE)
    cfg.update(config or {})
    rng = np.random.default_rng(derive_seed(seed, 0))
    base = LidarSpec.from_dict(cfg.get("lidar_spec", {}))
    bias = rng.uniform(-cfg["bias"], cfg["bias"], base.n_rings) if cfg["bias"] > 0 else np.zeros(base.n_rings)
    spec = LidarSpec(base.elevations, base.azimuth_step, float(cfg["noise_sigma"]), bias,
                     base.azimuth_min, base.azimuth_max)
    camera = CameraIntrinsics.from_dict(cfg["camera"]) if "camera" in cfg else default_camera()
    ext = RigidTransform3.from_dict(cfg["extrinsic_gt"]) if "extrinsic_gt" in cfg else default_extrinsic()
    scenes = []
    for i in range(int(cfg["n_scenes"])):
        srng = np.random.default_rng(derive_seed(seed, 1, i))
        targets, scans, corners = [], [], []
        for k, tc in enumerate(cfg["targets"]):
            shape = resolve_shape(tc["shape_ref"], tc.get("d"), tc.get("epsilon"))
            dist = srng.uniform(*tc["distance"])
            az = np.deg2rad(srng.uniform(*tc["azimuth_deg"]))
            el = np.deg2rad(srng.uniform(*cfg["elevation_deg"]))
            center = dist * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
            yaw = np.rad2deg(az) + srng.uniform(-1, 1) * cfg["yaw_jitter_deg"]
            pitch = srng.uniform(-1, 1) * cfg["pitch_jitter_deg"]
            pose = RigidTransform3(euler_xyz_to_rotation(0.0, pitch, yaw), center)
            st = SceneTarget(tc["shape_ref"], pose, tc.get("d"), tc.get("epsilon"), shape)
            scan = simulate_scan(spec, shape, pose, seed=derive_seed(seed, 2, i, k),
                                 azimuth_offset=srng.uniform(0.0, spec.azimuth_step), index=k)
            targets.append(st)
            scans.append(scan)
            corners.append(project_points(st.vertices(), ext, camera))
        init = perturb_transform(ext, cfg["init_rotation_deg"], cfg["init_translation"], srng)
        scenes.append(Scene(spec, targets, camera, ext, corners, scans, f"scene_{i:02d}", init))
    return scenes


# Four targets around the sensor, each tilted and turned a little differently so
# that no three normals are coplanar and every pair meets the ring plane.
INTRINSIC_LAYOUT = (
    # azimuth, pitch, yaw offset (deg)
    (0.0, 20.0, 15.0),
    (90.0, -15.0, -20.0),
    (180.0, 10.0, 25.0),
    (-90.0, -25.0, 10.0),
)


def intrinsic_scene(spec: LidarSpec | None = None, distance: float = 4.0, size: float = 1.0,
                    shape_ref: str = "square", seed: int = 0, name: str = "intrinsic") -> Scene:
    """One scene with four targets surrounding the LiDAR, for per-ring calibration.

    The camera only sees targets in front of it; corners of the others are NaN.
    """
    spec = spec or LidarSpec()
    camera, ext = default_camera(), default_extrinsic()
    targets, scans, corners = [], [], []
    for k, (az, pitch, yaw) in enumerate(INTRINSIC_LAYOUT):
        a = np.deg2rad(az)
        pose = RigidTransform3.from_euler(0.0, pitch, az + yaw, [distance * np.cos(a), distance * np.sin(a), 0.0])
        st = SceneTarget(shape_ref, pose, size, None, resolve_shape(shape_ref, size))
        targets.append(st)
        scans.append(simulate_scan(spec, st.shape, pose, seed=derive_seed(seed, 3, k), index=k))
        V = st.vertices()
        in_front = np.all(ext.apply(V)[:, 2] > 1e-9)
        corners.append(project_points(V, ext, camera) if in_front else np.full((len(V), 2), np.nan))
    return Scene(spec, targets, camera, ext, corners, scans, name, None)


# --------------------------------------------------------------------------- fitting


@dataclass
class VertexEstimate:
    vertices: np.ndarray
    pose: RigidTransform3 | None
    method: str


def fit_vertices(scan: Scan, target: PolygonTarget, method: str = "gl1", seed: int = 0,
                 restarts: int = 8) -> VertexEstimate:
    if method == "gl1":
        res = fit_target_l1(scan.points, target, L1Params(restarts=restarts), random_state=seed)
        return VertexEstimate(res.vertices, res.pose, method)
    if method == "template":
        E = extract_edge_points(scan.points, scan.rings)
        rings = [r for r in np.unique(scan.rings) if np.sum(scan.rings == r) >= 2]
        res = fit_template_p2l(E, target, rings=np.repeat(rings, 2), random_state=seed)
        return VertexEstimate(res.vertices, res.pose, method)
    if method == "rn":
        res = baseline_vertices(scan.points, scan.rings, RansacParams(seed=seed))
        return VertexEstimate(res.vertices, None, method)
    raise ValueError(f"unknown fit method {method!r}; expected one of {FIT_METHODS}")


def _ordered_pairs(scene: Scene, estimates, init: RigidTransform3):
    """Vertices and corners of every target, put into correspondence."""
    V, C = [], []
    for est, corners in zip(estimates, scene.corners):
        corners = np.asarray(corners, dtype=float)
        if len(est.vertices) == 4 and len(corners) == 4:
            perm = sort_correspondences(est.vertices, corners, scene.camera, init)
            V.append(est.vertices)
            C.append(corners[perm])
        else:
            V.append(est.vertices)
            C.append(corners)
    return V, C


@dataclass
class CalibrationReport:
    fit_method: str
    calib_method: str
    scene_names: list
    train_sets: list  # list of tuples of scene indices
    table: np.ndarray  # (n_train, n_scenes); NaN where a scene belongs to the training set
    train_rms: np.ndarray  # (n_train,)
    extrinsics: list
    vertex_rmse: list  # per scene, per target
    pose_errors: list  # per scene, per target: (e_t, e_r) or None
    extrinsic_errors: list  # per training set: (e_t, e_r) against the true extrinsic
    seed: int = 0
    notes: list = field(default_factory=list)

    @property
    def validation_values(self) -> np.ndarray:
        v = self.table[np.isfinite(self.table)]
        return v

    @property
    def validation_mean(self) -> float:
        return float(np.mean(self.validation_values))

    @property
    def validation_variance(self) -> float:
        v = self.validation_values
        return float(np.var(v, ddof=1)) if len(v) > 1 else 0.0

    def summary(self) -> dict:
        return {
            "fit": self.fit_method,
            "calib": self.calib_method,
            "validation_mean_px": self.validation_mean,
            "validation_variance_px2": self.validation_variance,
            "training_mean_px": float(np.mean(self.train_rms)),
            "n_validation_cells": int(len(self.validation_values)),
        }

    def to_dict(self) -> dict:
        def clean(x):
            return None if x is None or not np.isfinite(x) else float(x)

        return {
            "summary": self.summary(),
            "seed": self.seed,
            "scenes": list(self.scene_names),
            "train_sets": [list(t) for t in self.train_sets],
            "validation_px": [[clean(x) for x in row] for row in self.table],
            "training_px": [float(x) for x in self.train_rms],
            "extrinsics": [_pose_to_json(T) for T in self.extrinsics],
            "extrinsic_errors": [{"e_t": a, "e_r_deg": b} for a, b in self.extrinsic_errors],
            "vertex_rmse": self.vertex_rmse,
            "pose_errors": [[None if e is None else {"e_t": e[0], "e_r_deg": e[1]} for e in row]
                            for row in self.pose_errors],
            "notes": list(self.notes),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    def write_csv(self, path) -> None:
        """Training sets as rows and scenes as columns, pixel RMS per corner."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["train", "train_px", *self.scene_names])
            for t, tr, row in zip(self.train_sets, self.train_rms, self.table):
                label = "+".join(self.scene_names[i] for i in t)
                w.writerow([label, f"{tr:.6f}", *("" if not np.isfinite(x) else f"{x:.6f}" for x in row)])


def fit_scene(scene: Scene, method: str, seed: int, scene_index: int = 0, restarts: int = 8) -> list:
    if not scene.scans:
        raise SceneError(f"{scene.name}: scene has no scans to fit")
    return [fit_vertices(s, t.resolve(), method, derive_seed(seed, 3, scene_index, k), restarts)
            for k, (s, t) in enumerate(zip(scene.scans, scene.targets))]


def round_robin(scenes, fit: str = "gl1", calib: str = "pnp", seed: int = 0, train_sets=None,
                restarts: int = 8, init: RigidTransform3 | None = None) -> CalibrationReport:
    """Calibrate on each training set of scenes, validate on every scene outside it.

    ``train_sets`` defaults to every single scene. ``init`` overrides the
    initial extrinsic; otherwise each training set uses the ``extrinsic_init``
    of its first scene.
    """
    scenes = list(scenes)
    if len(scenes) < 2:
        raise ValueError("round robin needs at least two scenes")
    if fit not in FIT_METHODS:
        raise ValueError(f"unknown fit method {fit!r}")
    if calib not in CALIB_METHODS:
        raise ValueError(f"unknown calibration method {calib!r}")
    for s in scenes:
        if not s.corners or any(c is None for c in s.corners):
            raise SceneError(f"{s.name}: scene is missing image corners")
        s.validate()
    train_sets = [(i,) for i in range(len(scenes))] if train_sets is None else [tuple(t) for t in train_sets]
    for t in train_sets:
        if not t or any(not 0 <= i < len(scenes) for i in t):
            raise ValueError(f"invalid training set {t}")

    estimates = _map(lambda a: fit_scene(a[1], fit, seed, a[0], restarts), list(enumerate(scenes)))
    vrmse, perr = [], []
    for s, ests in zip(scenes, estimates):
        vrmse.append([vertex_rmse(match_vertices(e.vertices, t.vertices()), t.vertices())
                      for e, t in zip(ests, s.targets)])
        perr.append([None if e.pose is None else target_pose_error(e.pose, t.pose, t.resolve())
                     for e, t in zip(ests, s.targets)])

    def guess(s):
        if init is not None:
            return init
        return s.extrinsic_init if s.extrinsic_init is not None else s.extrinsic_gt

    pairs = [_ordered_pairs(s, ests, guess(s)) for s, ests in zip(scenes, estimates)]
    K = scenes[0].camera
    table = np.full((len(train_sets), len(scenes)), np.nan)
    train_rms, extrinsics, ext_err = [], [], []
    notes = []
    for row, t in enumerate(train_sets):
        V = [v for i in t for v in pairs[i][0]]
        C = [c for i in t for c in pairs[i][1]]
        H0 = guess(scenes[t[0]])
        if calib == "pnp":
            H = calibrate_pnp(np.vstack(V), np.vstack(C), K, H0)
        else:
            H = calibrate_iou(V, C, K, H0)
        extrinsics.append(H)
        ext_err.append(pose_error(H, scenes[t[0]].extrinsic_gt))
        train_rms.append(pixel_rms(project_points(np.vstack(V), H, K), np.vstack(C)))
        for j, s in enumerate(scenes):
            if j in t:
                continue
            Vj, Cj = pairs[j]
            table[row, j] = pixel_rms(project_points(np.vstack(Vj), H, s.camera), np.vstack(Cj))
    return CalibrationReport(fit, calib, [s.name for s in scenes], train_sets, table, np.array(train_rms),
                             extrinsics, vrmse, perr, ext_err, seed, notes)
