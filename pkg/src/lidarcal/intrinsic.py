"""Intrinsic calibration of a spinning LiDAR from planar targets.

Each ring gets its own correction, fitted by minimizing the summed absolute
point-to-plane distance over every target the ring hits. Three correction
models are available:

* ``sim3``: a similarity transform ``x -> s R x + t`` per ring.
* ``bl1``: additive range/elevation/azimuth offsets in spherical coordinates.
* ``bl2``: ``bl1`` plus a range scale and horizontal/vertical origin offsets.

Spherical coordinates follow ``x = rho cos(theta) sin(phi)``,
``y = rho cos(theta) cos(phi)``, ``z = rho sin(theta)``, so azimuth is measured
from the y axis towards x.
"""
from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_cloud
from .geom import RigidTransform3, Sim3Transform, rotation_angle
from .simlidar import Scan
from .targets import PolygonTarget
from .vertexfit import L1Params, fit_target_l1

PAIR_ORDER = tuple(combinations(range(4), 2))  # (0,1) (0,2) (0,3) (1,2) (1,3) (2,3)
MODELS = ("sim3", "bl1", "bl2")


class PlacementWarning(UserWarning):
    """The target arrangement may not pin down a unique Sim(3) correction."""


# --------------------------------------------------------------------------- spherical


@dataclass(frozen=True)
class SphericalPoint:
    rho: float
    theta: float
    phi: float

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("range must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.rho, self.theta, self.phi])


def cartesian_to_spherical(points) -> np.ndarray:
    """Rows ``(rho, theta, phi)``; raises for a point at the origin."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    rho = np.linalg.norm(P, axis=1)
    if np.any(rho <= 0):
        raise ValueError("spherical coordinates are undefined at the origin")
    theta = np.arcsin(np.clip(P[:, 2] / rho, -1.0, 1.0))
    phi = np.arctan2(P[:, 0], P[:, 1])
    return np.column_stack([rho, theta, phi])


def spherical_to_cartesian(sph) -> np.ndarray:
    S = np.atleast_2d(np.asarray(sph, dtype=float))
    rho, theta, phi = S[:, 0], S[:, 1], S[:, 2]
    ct = np.cos(theta)
    return np.column_stack([rho * ct * np.sin(phi), rho * ct * np.cos(phi), rho * np.sin(theta)])


def cart_sph_convert(p) -> SphericalPoint:
    rho, theta, phi = cartesian_to_spherical(np.asarray(p, dtype=float).reshape(1, 3))[0]
    return SphericalPoint(float(rho), float(theta), float(phi))


# --------------------------------------------------------------------------- baseline models


@dataclass(frozen=True)
class BL1Params:
    d_rho: float = 0.0
    d_theta: float = 0.0
    d_phi: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array([self.d_rho, self.d_theta, self.d_phi])

    @classmethod
    def from_vector(cls, x) -> "BL1Params":
        return cls(*map(float, np.asarray(x, dtype=float)[:3]))


@dataclass(frozen=True)
class BL2Params:
    d_rho: float = 0.0
    d_theta: float = 0.0
    d_phi: float = 0.0
    s: float = 1.0
    h: float = 0.0
    v: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array([self.d_rho, self.d_theta, self.d_phi, self.s, self.h, self.v])

    @classmethod
    def from_vector(cls, x) -> "BL2Params":
        return cls(*map(float, np.asarray(x, dtype=float)[:6]))


def _sph_rows(raw) -> np.ndarray:
    if isinstance(raw, SphericalPoint):
        return raw.as_array()[None, :]
    return np.atleast_2d(np.asarray(raw, dtype=float))


def bl1_correct(raw, alpha: BL1Params) -> np.ndarray:
    """Corrected Cartesian points; the measured elevation is replaced by ``d_theta``.

    ``raw`` is a :class:`SphericalPoint` or rows of ``(rho, theta, phi)``.
    """
    S = _sph_rows(raw)
    r = S[:, 0] + alpha.d_rho
    a = S[:, 2] - alpha.d_phi
    ct = np.cos(alpha.d_theta)
    out = np.column_stack([r * ct * np.sin(a), r * ct * np.cos(a), r * np.sin(alpha.d_theta) * np.ones_like(a)])
    return out[0] if isinstance(raw, SphericalPoint) else out


def bl2_correct(raw, alpha: BL2Params) -> np.ndarray:
    S = _sph_rows(raw)
    r = alpha.s * S[:, 0] + alpha.d_rho
    a = S[:, 2] - alpha.d_phi
    sa, ca = np.sin(a), np.cos(a)
    ct, st = np.cos(alpha.d_theta), np.sin(alpha.d_theta)
    out = np.column_stack([
        r * ct * sa - alpha.h * ca,
        r * ct * ca + alpha.h * sa,
        r * st + alpha.v,
    ])
    return out[0] if isinstance(raw, SphericalPoint) else out


def bl2_decomposed(raw, alpha: BL2Params) -> np.ndarray:
    """The same correction written as ``R1 (R2 t1 + t2)`` with point-dependent factors."""
    S = _sph_rows(raw)
    ct, st = np.cos(alpha.d_theta), np.sin(alpha.d_theta)
    R2 = np.array([[ct, 0.0, -st], [0.0, 1.0, 0.0], [st, 0.0, ct]])
    t2 = np.array([0.0, alpha.h, alpha.v])
    out = np.empty((len(S), 3))
    for k, (rho, _, phi) in enumerate(S):
        a = phi - alpha.d_phi
        R1 = np.array([[np.sin(a), -np.cos(a), 0.0], [np.cos(a), np.sin(a), 0.0], [0.0, 0.0, 1.0]])
        t1 = np.array([alpha.s * rho + alpha.d_rho, 0.0, 0.0])
        out[k] = R1 @ (R2 @ t1 + t2)
    return out[0] if isinstance(raw, SphericalPoint) else out


# --------------------------------------------------------------------------- correction models


class _Model:
    name = ""
    n_params = 0

    def initial(self, points) -> np.ndarray:
        raise NotImplementedError

    def steps(self) -> np.ndarray:
        raise NotImplementedError

    def apply(self, x, points) -> np.ndarray:
        raise NotImplementedError

    def describe(self, x) -> dict:
        raise NotImplementedError


class _Sim3Model(_Model):
    name, n_params = "sim3", 7

    def initial(self, points):
        return np.zeros(7)

    def steps(self):
        return np.array([1e-3, 5e-3, 5e-3, 5e-3, 1e-2, 1e-2, 1e-2])

    def apply(self, x, points):
        return Sim3Transform.from_vector(x).apply(points)

    def describe(self, x):
        T = Sim3Transform.from_vector(x)
        return {"scale": T.scale, "rotation": T.rotation.tolist(), "translation": T.translation.tolist(),
                "rotation_deg": float(np.rad2deg(rotation_angle(T.rotation)))}


class _BL1Model(_Model):
    name, n_params = "bl1", 3

    def initial(self, points):
        # The nominal elevation is zero in the model, so start d_theta at the ring's elevation.
        return np.array([0.0, float(np.mean(cartesian_to_spherical(points)[:, 1])), 0.0])

    def steps(self):
        return np.array([1e-2, 2e-3, 2e-3])

    def apply(self, x, points):
        return bl1_correct(cartesian_to_spherical(points), BL1Params.from_vector(x))

    def describe(self, x):
        p = BL1Params.from_vector(x)
        return {"d_rho": p.d_rho, "d_theta": p.d_theta, "d_phi": p.d_phi}


class _BL2Model(_Model):
    name, n_params = "bl2", 6

    def initial(self, points):
        return np.array([0.0, float(np.mean(cartesian_to_spherical(points)[:, 1])), 0.0, 1.0, 0.0, 0.0])

    def steps(self):
        return np.array([1e-2, 2e-3, 2e-3, 1e-3, 1e-2, 1e-2])

    def apply(self, x, points):
        return bl2_correct(cartesian_to_spherical(points), BL2Params.from_vector(x))

    def describe(self, x):
        p = BL2Params.from_vector(x)
        return {"d_rho": p.d_rho, "d_theta": p.d_theta, "d_phi": p.d_phi, "s": p.s, "h": p.h, "v": p.v}


def get_model(name: str) -> _Model:
    try:
        return {"sim3": _Sim3Model, "bl1": _BL1Model, "bl2": _BL2Model}[name]()
    except KeyError:
        raise ValueError(f"unknown intrinsic model {name!r}; expected one of {MODELS}") from None


# --------------------------------------------------------------------------- cost


@dataclass(frozen=True)
class TargetPlane:
    normal: np.ndarray
    anchor: np.ndarray

    def __post_init__(self):
        n = np.array(self.normal, dtype=float).reshape(3)
        p = np.array(self.anchor, dtype=float).reshape(3)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "anchor", p)


def plane_from_vertices(vertices) -> TargetPlane:
    V = as_cloud(vertices)
    c = V.mean(axis=0)
    n = np.linalg.svd(V - c)[2][-1]
    if n @ c > 0:
        n = -n
    return TargetPlane(n, c)


def plane_from_pose(pose: RigidTransform3) -> TargetPlane:
    """Plane of a target posed by ``pose`` (target to LiDAR)."""
    return TargetPlane(pose.rotation[:, 0], pose.translation)


def _check_unit(normals):
    N = np.atleast_2d(np.asarray(normals, dtype=float))
    bad = np.abs(np.linalg.norm(N, axis=1) - 1.0) > 1e-9
    if np.any(bad):
        raise ValueError(f"normal {int(np.argmax(bad))} is not unit length")
    return N


def p2p_cost(clouds, normals, anchors, correction=None) -> float:
    """Summed absolute point-to-plane distance after applying ``correction``.

    ``correction`` is ``None`` (identity), a callable mapping (n, 3) points to
    (n, 3) points, or anything with an ``apply`` method (e.g. Sim3Transform).
    """
    N = _check_unit(normals)
    A = np.atleast_2d(np.asarray(anchors, dtype=float))
    if not len(clouds) == len(N) == len(A):
        raise ValueError("need one normal and one anchor per cloud")
    if correction is None:
        fn = None
    elif hasattr(correction, "apply"):
        fn = correction.apply
    else:
        fn = correction
    total = 0.0
    for P, n, p0 in zip(clouds, N, A):
        P = as_cloud(P)
        if not len(P):
            continue
        Q = fn(P) if fn is not None else P
        total += float(np.abs((Q - p0) @ n).sum())
    return total


# --------------------------------------------------------------------------- placement


@dataclass(frozen=True)
class PlacementMatrix:
    matrix: np.ndarray
    singular_values: np.ndarray
    rank: int
    condition: float
    sim3_rank: int = -1
    sim3_condition: float = float("nan")

    @property
    def full_rank(self) -> bool:
        return self.rank == 15

    @property
    def sim3_unique(self) -> bool:
        """True when the linearized Sim(3) system (13 unknowns) has full column rank."""
        return self.sim3_rank == 13

    def to_dict(self) -> dict:
        return {"rank": self.rank, "condition": self.condition,
                "singular_values": self.singular_values.tolist(), "full_rank": self.full_rank,
                "sim3_rank": self.sim3_rank, "sim3_condition": self.sim3_condition,
                "sim3_unique": self.sim3_unique}


def intersection_points(normals, anchors, ring_normal=(0.0, 0.0, 1.0), ring_offset: float = 0.0):
    """Points where each pair of target planes meets the ring plane, in pair order 12,13,14,23,24,34."""
    N = np.atleast_2d(np.asarray(normals, dtype=float))
    A = np.atleast_2d(np.asarray(anchors, dtype=float))
    if len(N) < 4 or len(A) < 4:
        raise ValueError("placement analysis needs four targets")
    e = np.asarray(ring_normal, dtype=float)
    out = []
    for i, j in PAIR_ORDER:
        M = np.array([N[i], N[j], e])
        if abs(np.linalg.det(M)) < 1e-12:
            raise ValueError(f"targets {i + 1} and {j + 1} do not meet the ring plane in a single point")
        out.append(np.linalg.solve(M, [N[i] @ A[i], N[j] @ A[j], ring_offset]))
    return np.array(out)


def _rank_cond(A):
    s = np.linalg.svd(A, compute_uv=False)
    rank = int(np.sum(s > 1e-9 * s[0])) if s[0] > 0 else 0
    cond = float(s[0] / s[-1]) if s[-1] > 0 else float("inf")
    return s, rank, cond


def linearized_sim3_system(normals, points) -> np.ndarray:
    """18x13 system for ``(ds, w, t, alpha)`` with ``sR - I ~ ds I + hat(w)``.

    Same equations as :func:`placement_matrix`, with the arbitrary matrix
    replaced by a first-order similarity.
    """
    N = np.atleast_2d(np.asarray(normals, dtype=float))[:4]
    P = np.atleast_2d(np.asarray(points, dtype=float))
    A = np.zeros((18, 13))
    for q, (i, j) in enumerate(PAIR_ORDER):
        p = P[q]
        v = np.cross(N[i], N[j])
        # w x p = -(p x w)
        cross_p = np.array([[0.0, -p[2], p[1]], [p[2], 0.0, -p[0]], [-p[1], p[0], 0.0]])
        for k in range(3):
            r = 6 * k + q
            A[r, 0] = p[k]
            A[r, 1:4] = -cross_p[k]
            A[r, 4 + k] = 1.0
            A[r, 7 + q] = -v[k]
    return A


def placement_matrix(normals, points) -> PlacementMatrix:
    """The 18x15 linear system of the affine relaxation of the Sim(3) problem.

    ``normals`` holds the four target normals; ``points`` the six pairwise
    intersection points with the ring plane ``z = 0`` (only their x, y
    components enter). Rank counts singular values above ``1e-9 * s_max``.

    The raw rank never exceeds 14: the six points are the cuts of the ring
    plane with the edges of the tetrahedron bounded by the target planes, and a
    one-parameter family of affine maps of the ring plane keeps every cut on
    its edge. ``sim3_rank`` gives the rank of the linearized Sim(3) system,
    which is 13 for well-placed targets.
    """
    N = np.atleast_2d(np.asarray(normals, dtype=float))
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if len(N) < 4:
        raise ValueError(f"placement analysis needs four targets, got {len(N)}")
    if P.shape != (6, 3):
        raise ValueError("need six intersection points, one per target pair")
    N = N[:4]
    V = np.array([np.cross(N[i], N[j]) for i, j in PAIR_ORDER])
    X = P[:, :2]
    A = np.zeros((18, 15))
    for k in range(3):
        rows = slice(6 * k, 6 * k + 6)
        A[rows, 2 * k:2 * k + 2] = X
        A[rows, 6 + k] = 1.0
        A[rows, 9:15] = -np.diag(V[:, k])
    s, rank, cond = _rank_cond(A)
    _, r13, c13 = _rank_cond(linearized_sim3_system(N, P))
    return PlacementMatrix(A, s, rank, cond, r13, c13)


def placement_from_planes(planes) -> PlacementMatrix:
    planes = list(planes)
    if len(planes) < 4:
        raise ValueError(f"placement analysis needs four targets, got {len(planes)}")
    N = np.array([p.normal for p in planes[:4]])
    A = np.array([p.anchor for p in planes[:4]])
    return placement_matrix(N, intersection_points(N, A))


# --------------------------------------------------------------------------- ring fitting


def _simplex_search(fun, x0, steps, rounds=8, tol=1e-10):
    x = np.asarray(x0, dtype=float)
    fx = fun(x)
    for _ in range(rounds):
        simplex = np.vstack([x, x + np.diag(steps)])
        res = minimize(fun, x, method="Nelder-Mead",
                       options={"initial_simplex": simplex, "xatol": 1e-10, "fatol": tol,
                                "maxiter": 20000, "maxfev": 40000})
        if res.fun < fx - tol:
            x, fx = res.x, float(res.fun)
            steps = steps * 0.5
        else:
            break
    return x, fx


def fit_ring(model: _Model, clouds, planes, x0=None):
    """Fit one ring's correction; returns ``(x, cost_before, cost_after)``.

    ``cost_before`` is evaluated at the model's neutral parameters: the
    identity for Sim(3), zero offsets at the ring's mean elevation for the
    spherical models (which cannot represent "no correction" exactly).
    """
    clouds = [as_cloud(c) for c in clouds]
    keep = [k for k, c in enumerate(clouds) if len(c)]
    clouds = [clouds[k] for k in keep]
    planes = [planes[k] for k in keep]
    N = np.array([p.normal for p in planes])
    A = np.array([p.anchor for p in planes])
    allpts = np.vstack(clouds)
    x_init = model.initial(allpts) if x0 is None else np.asarray(x0, dtype=float)

    def fun(x):
        try:
            return p2p_cost(clouds, N, A, lambda P: model.apply(x, P))
        except ValueError:
            return np.inf

    neutral = model.initial(allpts)
    before = fun(neutral)
    x, fx = _simplex_search(fun, x_init, model.steps())
    if before < fx:
        x, fx = neutral, before
    return x, before, fx


def _n_threads(n_jobs=None) -> int:
    if n_jobs is not None:
        return max(1, int(n_jobs))
    try:
        return max(1, int(os.environ.get("CALIB_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class IntrinsicResult:
    model: str
    params: dict  # ring id -> parameter vector
    cost_before: dict
    cost_after: dict
    outer_iterations: int
    vertex_changes: list
    placement: PlacementMatrix | None = None
    warnings: list = field(default_factory=list)
    vertices: list | None = None

    def describe(self, ring) -> dict:
        return get_model(self.model).describe(self.params[ring])

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "rings": {
                str(r): {"params": self.params[r].tolist(), **self.describe(r),
                         "cost_before": self.cost_before[r], "cost_after": self.cost_after[r]}
                for r in sorted(self.params)
            },
            "outer_iterations": self.outer_iterations,
            "vertex_changes": list(self.vertex_changes),
            "placement": None if self.placement is None else self.placement.to_dict(),
            "warnings": list(self.warnings),
        }


def apply_correction(scan: Scan, model: str, params: dict) -> Scan:
    """Correct each ring of ``scan`` with its parameters; rings without any stay as measured."""
    m = get_model(model)
    P = scan.points.copy()
    for r, x in params.items():
        mask = scan.rings == r
        if mask.any():
            P[mask] = m.apply(x, scan.points[mask])
    return scan.with_points(P)


def _group_by_ring(scans, min_targets):
    rings = {}
    for t, s in enumerate(scans):
        for r in np.unique(s.rings):
            rings.setdefault(int(r), {})[t] = s.points[s.rings == r]
    return {r: d for r, d in rings.items() if len(d) >= min_targets}


def calibrate_rings(scans, model: str = "sim3", targets=None, planes=None, init_poses=None,
                    max_outer: int = 20, tol: float = 1e-5, min_targets: int = 2,
                    fit_params: L1Params | None = None, random_state=0, n_jobs=None) -> IntrinsicResult:
    """Per-ring intrinsic calibration over scans of several planar targets.

    ``scans[t]`` holds the returns on target ``t``. With ``planes`` given (known
    target geometry, as in simulation) a single parameter fit is done. Otherwise
    the target vertices are fitted with the L1 volume method and the loop
    alternates vertex and parameter estimation until the largest vertex change
    drops below ``tol`` or ``max_outer`` iterations have run; it also stops as
    soon as the change fails to decrease.
    """
    m = get_model(model)
    scans = list(scans)
    if len(scans) < 2:
        raise ValueError("intrinsic calibration needs scans of at least two targets")
    if planes is None and targets is None:
        raise ValueError("give either the target planes or the target shapes")
    if targets is not None and len(targets) != len(scans):
        raise ValueError("need one target shape per scan")
    fit_params = fit_params or L1Params(restarts=4)
    workers = _n_threads(n_jobs)
    grouped = _group_by_ring(scans, min_targets)
    if not grouped:
        raise ValueError(f"no ring hits {min_targets} or more targets")

    notes = []
    vertices, poses = None, list(init_poses) if init_poses is not None else [None] * len(scans)

    def refit_vertices(current):
        nonlocal poses
        out = []
        for t, (s, tgt) in enumerate(zip(current, targets)):
            res = fit_target_l1(s.points, tgt, fit_params, init=poses[t], random_state=random_state)
            poses[t] = res.transform
            out.append(res.vertices)
        return out

    if planes is None:
        vertices = refit_vertices(scans)
        planes = [plane_from_vertices(v) for v in vertices]
    planes = list(planes)

    placement = None
    if model == "sim3":
        try:
            placement = placement_from_planes(planes)
            if not placement.sim3_unique:
                msg = (f"linearized Sim(3) placement system has rank {placement.sim3_rank} < 13 "
                       f"(raw 18x15 rank {placement.rank}); the correction may not be unique")
                notes.append(msg)
                warnings.warn(msg, PlacementWarning, stacklevel=2)
        except ValueError as exc:
            notes.append(f"placement check skipped: {exc}")

    params = {}
    cost_before, cost_after = {}, {}
    changes = []

    def fit_all(current_planes, previous):
        items = sorted(grouped.items())

        def job(item):
            r, by_target = item
            ts = sorted(by_target)
            return r, fit_ring(m, [by_target[t] for t in ts], [current_planes[t] for t in ts],
                               previous.get(r))

        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                return list(ex.map(job, items))
        return [job(it) for it in items]

    outer = 0
    while True:
        outer += 1
        for r, (x, b, a) in fit_all(planes, params):
            params[r] = x
            cost_after[r] = a
            cost_before[r] = b  # same planes as cost_after
        if vertices is None or outer >= max_outer:
            break
        corrected = [apply_correction(s, model, params) for s in scans]
        new_vertices = refit_vertices(corrected)
        delta = max(float(np.max(np.linalg.norm(nv - v, axis=1))) for nv, v in zip(new_vertices, vertices))
        vertices = new_vertices
        planes = [plane_from_vertices(v) for v in vertices]
        if changes and delta >= changes[-1]:
            changes.append(delta)
            notes.append("vertex change stopped decreasing; loop ended early")
            break
        changes.append(delta)
        if delta < tol:
            break
    return IntrinsicResult(model, params, cost_before, cost_after, outer, changes, placement, notes,
                           None if vertices is None else [v.tolist() for v in vertices])


class RingIntrinsicCalibrator(BaseEstimator):
    """Per-ring intrinsic calibration as an estimator.

    ``fit(X)`` takes a list of :class:`Scan`, one per target. Pass the target
    planes via ``planes`` (known geometry) or the target shapes via ``targets``
    to fit vertices from the data. ``transform`` corrects a scan.
    """

    def __init__(self, model="sim3", targets=None, max_outer=20, tol=1e-5, random_state=0, n_jobs=None):
        self.model = model
        self.targets = targets
        self.max_outer = max_outer
        self.tol = tol
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y=None, planes=None, init_poses=None):
        get_model(self.model)
        self.result_ = calibrate_rings(X, self.model, self.targets, planes, init_poses, self.max_outer,
                                       self.tol, random_state=self.random_state, n_jobs=self.n_jobs)
        self.params_ = self.result_.params
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        if isinstance(X, Scan):
            return apply_correction(X, self.model, self.params_)
        return [apply_correction(s, self.model, self.params_) for s in X]
