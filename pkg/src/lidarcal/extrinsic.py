"""LiDAR-to-camera extrinsics from target vertices and image corners.

Two objectives over SE(3): summed squared reprojection error (PnP) and summed
intersection-over-union of the projected and observed target polygons.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import least_squares, minimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_cloud, as_pixels
from .camera import BehindCameraError, CameraIntrinsics, project_points
from .geom import RigidTransform3, so3_exp


class CalibrationError(ValueError):
    pass


def _cross2(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def shoelace_area(poly) -> float:
    """Unsigned polygon area from its ordered vertices."""
    V = np.asarray(poly, dtype=float).reshape(-1, 2)
    if len(V) < 3:
        raise ValueError("a polygon needs at least three vertices")
    x, y = V[:, 0], V[:, 1]
    return float(0.5 * abs(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)))


def convex_hull_ccw(points) -> np.ndarray:
    """Counterclockwise convex hull (monotone chain), collinear points dropped."""
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    pts = sorted(set(map(tuple, P)))
    if len(pts) < 3:
        raise ValueError("hull needs three distinct points")
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross2(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross2(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise ValueError("points are collinear")
    return np.array(hull)


def _ensure_ccw(poly):
    V = np.asarray(poly, dtype=float).reshape(-1, 2)
    x, y = V[:, 0], V[:, 1]
    if np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) < 0:
        V = V[::-1]
    return V


def polygon_intersection(a, b) -> np.ndarray:
    """Clip convex polygon ``a`` by each edge of convex polygon ``b``.

    Returns the CCW intersection polygon, or an empty (0, 2) array when the
    overlap has no area.
    """
    subject = [tuple(p) for p in _ensure_ccw(a)]
    clip = _ensure_ccw(b)
    for i in range(len(clip)):
        if not subject:
            break
        c0, c1 = clip[i], clip[(i + 1) % len(clip)]
        inp, subject = subject, []
        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            cur_in = _cross2(c0, c1, cur) >= 0
            prev_in = _cross2(c0, c1, prev) >= 0
            if cur_in != prev_in:
                d1 = _cross2(c0, c1, prev)
                d2 = _cross2(c0, c1, cur)
                t = d1 / (d1 - d2)
                subject.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            if cur_in:
                subject.append(cur)
    if len(subject) < 3:
        return np.zeros((0, 2))
    out = np.array(subject)
    if shoelace_area(out) <= 1e-12:
        return np.zeros((0, 2))
    return out


def iou(a, b) -> float:
    area_a, area_b = shoelace_area(a), shoelace_area(b)
    if area_a <= 0 and area_b <= 0:
        raise ValueError("IoU of two zero-area polygons is undefined")
    inter = polygon_intersection(a, b)
    ai = shoelace_area(inter) if len(inter) else 0.0
    return float(ai / (area_a + area_b - ai))


def _pose(x, init: RigidTransform3) -> RigidTransform3:
    return RigidTransform3(so3_exp(x[:3]) @ init.rotation, init.translation + x[3:6])


def reprojection_residuals(extrinsic, X, Y, K) -> np.ndarray:
    return (project_points(X, extrinsic, K) - Y).ravel()


def calibrate_pnp(vertices, corners, K: CameraIntrinsics, init: RigidTransform3,
                  return_info: bool = False):
    """Least-squares reprojection fit over SE(3), starting from ``init``."""
    X = as_cloud(vertices)
    Y = as_pixels(corners)
    if len(X) != len(Y):
        raise CalibrationError("vertex and corner counts differ")
    if len(X) < 4:
        raise CalibrationError("PnP needs at least four correspondences")

    def resid(x):
        try:
            return reprojection_residuals(_pose(x, init), X, Y, K)
        except BehindCameraError:
            return np.full(2 * len(X), 1e6)

    r0 = resid(np.zeros(6))
    sol = least_squares(resid, np.zeros(6), method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14)
    if not np.all(np.isfinite(sol.x)):
        raise CalibrationError("PnP optimizer diverged")
    if sol.cost > 0.5 * (r0 @ r0):
        sol_x, cost = np.zeros(6), 0.5 * (r0 @ r0)
    else:
        sol_x, cost = sol.x, sol.cost
    H = _pose(sol_x, init)
    if return_info:
        return H, {"initial_cost": float(r0 @ r0), "final_cost": float(2 * cost), "nfev": int(sol.nfev)}
    return H


def summed_iou(extrinsic, vertex_groups, corner_groups, K) -> float:
    total = 0.0
    for V, C in zip(vertex_groups, corner_groups):
        proj = project_points(V, extrinsic, K)
        total += iou(convex_hull_ccw(proj), convex_hull_ccw(C))
    return total


def calibrate_iou(vertex_groups, corner_groups, K: CameraIntrinsics, init: RigidTransform3,
                  return_info: bool = False):
    """Maximize the summed IoU of projected target polygons by simplex search.

    ``vertex_groups`` and ``corner_groups`` hold one (4, 3) / (4, 2) array per target.
    """
    vg = [as_cloud(v) for v in vertex_groups]
    cg = [as_pixels(c) for c in corner_groups]
    if len(vg) != len(cg) or not vg:
        raise CalibrationError("need matching, non-empty vertex and corner groups")
    if sum(len(v) for v in vg) < 4:
        raise CalibrationError("IoU calibration needs at least four correspondences")

    def neg(x):
        try:
            return -summed_iou(_pose(x, init), vg, cg, K)
        except (BehindCameraError, ValueError):
            return 0.0

    f0 = neg(np.zeros(6))
    if f0 >= 0.0:
        raise CalibrationError("projected polygons do not overlap at the initial guess; "
                               "supply a better initial extrinsic")
    x, fx = np.zeros(6), f0
    step_r, step_t = 0.01, 0.02
    nfev = 1
    for _ in range(6):
        simplex = np.zeros((7, 6))
        simplex[1:4, :3] = np.eye(3) * step_r
        simplex[4:7, 3:] = np.eye(3) * step_t
        res = minimize(neg, x, method="Nelder-Mead",
                       options={"initial_simplex": x + simplex, "xatol": 1e-9, "fatol": 1e-12,
                                "maxiter": 6000, "maxfev": 12000})
        nfev += res.nfev
        if res.fun < fx - 1e-12:
            x, fx = res.x, float(res.fun)
            step_r, step_t = step_r * 0.3, step_t * 0.3
        else:
            break
    H = _pose(x, init)
    if return_info:
        return H, {"initial_iou": -f0, "final_iou": -fx, "nfev": nfev}
    return H


class ExtrinsicCalibrator(BaseEstimator):
    """Fit LiDAR-to-camera extrinsics from vertices (X) and pixel corners (y).

    Rows of ``X`` and ``y`` are corresponding points; for ``method="iou"`` they
    are consecutive groups of ``group_size`` points, one group per target.
    """

    def __init__(self, intrinsics=None, init=None, method="pnp", group_size=4):
        self.intrinsics = intrinsics
        self.init = init
        self.method = method
        self.group_size = group_size

    def fit(self, X, y):
        X = as_cloud(X)
        y = as_pixels(y)
        init = self.init if self.init is not None else RigidTransform3()
        if self.method == "pnp":
            self.extrinsic_, self.info_ = calibrate_pnp(X, y, self.intrinsics, init, return_info=True)
        elif self.method == "iou":
            g = self.group_size
            if len(X) % g:
                raise CalibrationError(f"point count is not a multiple of {g}")
            vg = [X[i:i + g] for i in range(0, len(X), g)]
            cg = [y[i:i + g] for i in range(0, len(y), g)]
            self.extrinsic_, self.info_ = calibrate_iou(vg, cg, self.intrinsics, init, return_info=True)
        else:
            raise ValueError(f"unknown method {self.method!r}")
        return self

    def predict(self, X):
        check_is_fitted(self, "extrinsic_")
        return project_points(as_cloud(X), self.extrinsic_, self.intrinsics)

    def score(self, X, y):
        """Negative pixel RMS per corner."""
        d = self.predict(X) - as_pixels(y)
        return -float(np.sqrt(np.mean(np.sum(d**2, axis=1))))
