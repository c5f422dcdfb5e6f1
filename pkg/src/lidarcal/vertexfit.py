"""Target vertex estimation by fitting a reference target volume to a point cloud.

Two estimators live here:

* the L1-inspired volume fit: pull the cloud back through a candidate pose and
  charge every point by how far it lies outside the target's region of interest;
* the point-to-line template fit: associate ring edge points with template edge
  lines and minimize squared point-to-line distances, alternating the two steps.

Both return the pose and the vertices obtained by pushing the reference
vertices through that pose, so the estimated vertices are always congruent to
the reference polygon.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from ._validation import as_cloud
from .geom import RigidTransform3, se3_distance, so3_exp, so3_log
from .simlidar import Scan
from .targets import DEFAULT_EPSILON, EdgeLineSet, PolygonTarget, edge_lines, make_square

MIN_POINTS = 8


class FitError(ValueError):
    """The cloud cannot constrain a target pose."""


@dataclass(frozen=True)
class FitResult:
    """``transform`` maps LiDAR coordinates into the target frame (the pullback)."""

    transform: RigidTransform3
    vertices: np.ndarray
    cost: float
    iterations: int
    restarts: int
    method: str = "gl1"
    history: tuple = field(default=(), compare=False)

    @property
    def pose(self) -> RigidTransform3:
        """Target-to-LiDAR transform."""
        return self.transform.inverse()

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "transform": self.transform.to_dict(),
            "pose": self.pose.to_dict(),
            "vertices": np.asarray(self.vertices).tolist(),
            "cost": float(self.cost),
            "iterations": int(self.iterations),
            "restarts": int(self.restarts),
        }


@dataclass(frozen=True)
class L1Params:
    epsilon: float | None = None  # None: use the target's own epsilon
    d: float | None = None
    restarts: int = 8
    ftol: float = 1e-8
    xtol: float = 1e-6
    max_rotation_deg: float = 30.0
    center_slab: bool = True  # tie-break on the zero-cost plateau, see _center_in_slab


def l1_scalar_cost(lam, a):
    """Zero inside ``[-a, a]``, distance to the nearer bound outside."""
    lam = np.asarray(lam, dtype=float)
    excess = np.abs(lam) - a
    out = np.where(excess > 0, excess, 0.0)
    return float(out) if out.ndim == 0 else out


def _check_nonempty(cloud) -> np.ndarray:
    P = np.atleast_2d(np.asarray(cloud, dtype=float))
    if P.size == 0:
        raise FitError("cost of an empty cloud is undefined")
    return P


def cloud_cost_box(pullback, epsilon, d) -> float:
    """Box cost: ``sum c(x, eps) + c(y, d/2) + c(z, d/2)`` over the pulled-back cloud."""
    P = _check_nonempty(pullback)
    return float(
        l1_scalar_cost(P[:, 0], epsilon).sum()
        + l1_scalar_cost(P[:, 1], d / 2.0).sum()
        + l1_scalar_cost(P[:, 2], d / 2.0).sum()
    )


def polygon_point_costs(P, epsilon, lines: EdgeLineSet) -> np.ndarray:
    """Per-point cost: slab excess along x plus the distance to every violated edge."""
    slab = np.abs(P[:, 0]) - epsilon
    slab = np.where(slab > 0, slab, 0.0)
    sd = lines.signed_distance(P[:, 1:3])
    return slab + np.where(sd < 0, -sd, 0.0).sum(axis=1)


def cloud_cost_polygon(pullback, target: PolygonTarget, lines: EdgeLineSet | None = None) -> float:
    P = _check_nonempty(pullback)
    if lines is None:
        lines = edge_lines(target)
    return float(polygon_point_costs(P, target.epsilon, lines).sum())


def plane_normal(points) -> np.ndarray:
    """Least singular vector of the centered cloud, pointing away from the origin."""
    P = np.asarray(points, dtype=float)
    c = P.mean(axis=0)
    _, s, vt = np.linalg.svd(P - c, full_matrices=False)
    n = vt[-1]
    return n if n @ c >= 0 else -n


def align_x_to(n) -> np.ndarray:
    """Smallest rotation taking ``e1`` onto the unit vector ``n``."""
    n = np.asarray(n, dtype=float) / np.linalg.norm(n)
    e1 = np.array([1.0, 0.0, 0.0])
    axis = np.cross(e1, n)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        return np.eye(3) if n[0] > 0 else so3_exp([0.0, 0.0, np.pi])
    return so3_exp(axis / s * np.arctan2(s, n @ e1))


def _random_rotation(rng, max_angle_rad) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle_rad))


def initial_rotations(points, n: int, random_state=None, max_angle_deg: float = 30.0):
    """Identity, then the plane-aligned rotation, then random perturbations of it."""
    rng = check_random_state(random_state)
    rots = [np.eye(3)]
    base = np.eye(3)
    P = np.asarray(points, dtype=float)
    if len(P) >= 3:
        sv = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
        if sv[1] > 1e-9 * max(sv[0], 1e-300):
            base = align_x_to(plane_normal(P))
            rots.append(base)
    while len(rots) < n:
        rots.append(base @ _random_rotation(rng, np.deg2rad(max_angle_deg)))
    return rots[:max(n, 1)]


def _pose_from_params(x, R0, t0) -> RigidTransform3:
    return RigidTransform3(R0 @ so3_exp(x[:3]), t0 + x[3:6])


def _simplex(scale_rot, scale_t) -> np.ndarray:
    S = np.zeros((7, 6))
    S[1:4, :3] = np.eye(3) * scale_rot
    S[4:7, 3:] = np.eye(3) * scale_t
    return S


def _nelder_mead(fun, x0, step_rot, step_t, ftol, xtol, max_rounds=6):
    """Nelder-Mead with restarts from the incumbent until a round stops improving."""
    x = np.asarray(x0, dtype=float)
    fx = fun(x)
    history = [fx]
    nfev = 1
    for _ in range(max_rounds):
        res = minimize(
            fun, x, method="Nelder-Mead",
            options={
                "initial_simplex": x + _simplex(step_rot, step_t),
                "xatol": xtol, "fatol": ftol, "maxiter": 4000, "maxfev": 8000,
            },
        )
        nfev += res.nfev
        improved = res.fun < fx - ftol
        if res.fun <= fx:
            x, fx = res.x, float(res.fun)
        history.append(fx)
        if not improved:
            break
        step_rot, step_t = step_rot * 0.5, step_t * 0.5
    return x, fx, nfev, history


def _center_in_slab(P, cost_of, R0, t0, x0, f0, step_rot, step_t, ftol, xtol):
    """Among poses whose L1 cost does not exceed ``f0``, prefer the one that
    puts the points closest to the slab mid-plane.

    The L1 cost is flat wherever every point sits inside the slab, so a
    noise-free cloud admits a family of tilted and shifted zero-cost fits.
    The mean squared out-of-plane offset picks the member of that family whose
    mid-plane passes through the points. The L1 cost is never raised.
    """
    slack = ftol + 1e-12 * max(1.0, abs(f0))
    penalty = 1e3

    def fun(x):
        pull = (P - (t0 + x[3:6])) @ (R0 @ so3_exp(x[:3]))
        excess = cost_of(pull) - f0
        return float(np.mean(pull[:, 0] ** 2)) + penalty * max(excess, 0.0)

    x, _, nfev, _ = _nelder_mead(fun, x0, step_rot, step_t, 1e-14, xtol)
    pull = (P - (t0 + x[3:6])) @ (R0 @ so3_exp(x[:3]))
    fx = cost_of(pull)
    if fx <= f0 + slack:
        return x, fx, nfev
    return x0, f0, nfev


def fit_target_l1(cloud, target: PolygonTarget | None = None, params: L1Params | None = None,
                  init: RigidTransform3 | None = None, random_state=None,
                  cost: str = "polygon") -> FitResult:
    """Fit the reference target volume to ``cloud`` by multi-start simplex descent.

    ``cost="box"`` uses the rectangular-volume cost with side ``params.d``; this
    needs no polygon. Restart 0 starts from ``init`` when given, otherwise from
    the identity rotation at the cloud centroid.
    """
    params = params or L1Params()
    P = as_cloud(cloud)
    if len(P) < MIN_POINTS:
        raise FitError(f"need at least {MIN_POINTS} points on the target, got {len(P)}")
    if cost == "box":
        d = params.d
        if d is None:
            if target is None:
                raise ValueError("box cost needs a side length d")
            d = float(np.sqrt(target.area))
        eps = DEFAULT_EPSILON if params.epsilon is None else params.epsilon
        ref = make_square(d, eps)

        def cost_of(pull):
            return cloud_cost_box(pull, eps, d)
    elif cost == "polygon":
        if target is None:
            raise ValueError("polygon cost needs a target")
        ref = target.with_epsilon(params.epsilon) if params.epsilon is not None else target
        lines = edge_lines(ref)
        eps = ref.epsilon

        def cost_of(pull):
            return float(polygon_point_costs(pull, eps, lines).sum())
    else:
        raise ValueError(f"unknown cost {cost!r}")

    size = float(np.sqrt(ref.area))
    centroid = P.mean(axis=0)
    rots = initial_rotations(P, params.restarts, random_state, params.max_rotation_deg)
    starts = [(R, centroid) for R in rots]
    if init is not None:
        pose0 = init.inverse()
        starts[0] = (pose0.rotation, pose0.translation)

    best = None
    total_iter = 0
    for k, (R0, t0) in enumerate(starts):
        def fun(x, R0=R0, t0=t0):
            R = R0 @ so3_exp(x[:3])
            val = cost_of((P - (t0 + x[3:6])) @ R)
            if not np.isfinite(val):
                raise FitError("non-finite cost")
            return val

        x, fx, nfev, hist = _nelder_mead(fun, np.zeros(6), 0.05, 0.1 * size, params.ftol, params.xtol)
        total_iter += nfev
        if best is None or fx < best[0]:
            best = (fx, k, x, R0, t0, hist)
    fx, k, x, R0, t0, hist = best
    if params.center_slab:
        x, fx, nfev = _center_in_slab(P, cost_of, R0, t0, x, fx, 0.01, 0.01 * size, params.ftol, params.xtol)
        total_iter += nfev
    pose = _pose_from_params(x, R0, t0)
    return FitResult(
        transform=pose.inverse(),
        vertices=pose.apply(ref.vertices_3d()),
        cost=fx,
        iterations=total_iter,
        restarts=len(starts),
        method="gl1" if cost == "polygon" else "gl1-box",
        history=tuple(hist),
    )


def extract_edge_points(cloud, rings) -> np.ndarray:
    """First and last return of every ring, ordered by azimuth."""
    P = as_cloud(cloud)
    rings = np.asarray(rings)
    out = []
    for r in np.unique(rings):
        Q = P[rings == r]
        if len(Q) < 2:
            continue
        az = np.arctan2(Q[:, 1], Q[:, 0])
        out.append(Q[np.argmin(az)])
        out.append(Q[np.argmax(az)])
    return np.array(out).reshape(-1, 3)


def _line_residuals(pull, lines: EdgeLineSet, assign) -> np.ndarray:
    """Per-point (x, in-plane) offsets from the assigned template line."""
    a = lines.coeffs[assign]
    d = pull[:, 1] * a[:, 0] + pull[:, 2] * a[:, 1] + a[:, 2]
    return np.concatenate([pull[:, 0], d])


def _p2l_cost(pull, lines: EdgeLineSet):
    """Sum of squared distances to the nearest template line, plus that association."""
    dist = lines.values(pull[:, 1:3]) ** 2 + (pull[:, 0] ** 2)[:, None]
    assign = np.argmin(dist, axis=1)
    return float(dist[np.arange(len(pull)), assign].sum()), assign


def fit_template_p2l(edge_points, target: PolygonTarget, init: RigidTransform3 | None = None,
                     rings=None, n_starts: int = 8, random_state=None, tol: float = 1e-5,
                     max_outer: int = 100) -> FitResult:
    """Alternate edge association and least-squares pose refinement.

    ``rings`` (one id per edge point) is only used to check that the points span
    at least two rings.
    """
    E = as_cloud(edge_points)
    if len(E) < 4:
        raise FitError("need at least 4 edge points")
    if rings is not None and len(np.unique(rings)) < 2:
        raise FitError("edge points must span at least two rings")
    sv = np.linalg.svd(E - E.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-12):
        raise FitError("edge points are collinear")
    lines = edge_lines(target)
    centroid = E.mean(axis=0)
    rots = initial_rotations(E, n_starts, random_state)
    starts = [RigidTransform3(R, centroid) for R in rots]
    if init is not None:
        starts[0] = init.inverse()

    best = None
    total_iter = 0
    for k, pose in enumerate(starts):
        history = []
        cost, assign = _p2l_cost(pose.inverse().apply(E), lines)
        history.append(cost)
        for it in range(max_outer):
            R0, t0 = pose.rotation, pose.translation

            def resid(x, R0=R0, t0=t0, assign=assign):
                R = R0 @ so3_exp(x[:3])
                return _line_residuals((E - (t0 + x[3:6])) @ R, lines, assign)

            sol = least_squares(resid, np.zeros(6), method="lm", xtol=1e-12, ftol=1e-12)
            total_iter += 1
            new_pose = _pose_from_params(sol.x, R0, t0)
            new_cost, new_assign = _p2l_cost(new_pose.inverse().apply(E), lines)
            if new_cost > cost:
                break
            step = se3_distance(pose, new_pose)
            pose, cost, assign = new_pose, new_cost, new_assign
            history.append(cost)
            if step < tol:
                break
        if best is None or cost < best[0]:
            best = (cost, pose, history)
    cost, pose, history = best
    return FitResult(
        transform=pose.inverse(),
        vertices=pose.apply(target.vertices_3d()),
        cost=cost,
        iterations=total_iter,
        restarts=len(starts),
        method="template",
        history=tuple(history),
    )


def _scan_parts(X, rings):
    if isinstance(X, Scan):
        return X.points, X.rings
    return as_cloud(X), rings


class L1TargetFitter(BaseEstimator):
    """Estimate a target's pose and vertices from its LiDAR returns.

    Parameters
    ----------
    target : PolygonTarget, optional
        Reference shape. Required unless ``cost="box"``.
    epsilon : float
        Half-thickness of the target slab, meters.
    cost : {"polygon", "box"}
    d : float, optional
        Square side for the box cost.
    n_restarts : int
    random_state : int, RandomState or None

    Attributes
    ----------
    result_ : FitResult
    pose_ : RigidTransform3
        Target-to-LiDAR transform.
    vertices_ : ndarray of shape (m, 3)
    """

    def __init__(self, target=None, epsilon=DEFAULT_EPSILON, cost="polygon", d=None,
                 n_restarts=8, random_state=None):
        self.target = target
        self.epsilon = epsilon
        self.cost = cost
        self.d = d
        self.n_restarts = n_restarts
        self.random_state = random_state

    def fit(self, X, y=None, init=None):
        P, _ = _scan_parts(X, None)
        params = L1Params(epsilon=self.epsilon, d=self.d, restarts=self.n_restarts)
        self.result_ = fit_target_l1(P, self.target, params, init=init,
                                     random_state=self.random_state, cost=self.cost)
        self.pose_ = self.result_.pose
        self.vertices_ = self.result_.vertices
        self.cost_ = self.result_.cost
        return self

    def transform(self, X):
        """Pull points back into the fitted target frame."""
        check_is_fitted(self, "result_")
        P, _ = _scan_parts(X, None)
        return self.result_.transform.apply(P)

    def predict(self, X=None):
        check_is_fitted(self, "result_")
        return self.vertices_

    def score(self, X, y=None):
        """Negative L1 volume cost of ``X`` under the fitted pose."""
        pull = self.transform(X)
        if self.cost == "box":
            d = self.d if self.d is not None else float(np.sqrt(self.target.area))
            return -cloud_cost_box(pull, self.epsilon, d)
        return -cloud_cost_polygon(pull, self.target.with_epsilon(self.epsilon))


class TemplateFitter(BaseEstimator):
    """Point-to-line template fit on ring edge points.

    ``fit`` takes the full target cloud plus ring ids and extracts the first and
    last return of each ring itself.
    """

    def __init__(self, target=None, n_starts=8, tol=1e-5, max_outer=100, random_state=None):
        self.target = target
        self.n_starts = n_starts
        self.tol = tol
        self.max_outer = max_outer
        self.random_state = random_state

    def fit(self, X, y=None, rings=None, init=None):
        P, rings = _scan_parts(X, rings)
        if rings is None:
            raise ValueError("TemplateFitter needs ring ids")
        E = extract_edge_points(P, rings)
        edge_rings = [r for r in np.unique(rings) if np.sum(rings == r) >= 2]
        self.edge_points_ = E
        self.result_ = fit_template_p2l(
            E, self.target, init=init, rings=np.repeat(edge_rings, 2),
            n_starts=self.n_starts, random_state=self.random_state, tol=self.tol,
            max_outer=self.max_outer,
        )
        self.pose_ = self.result_.pose
        self.vertices_ = self.result_.vertices
        self.cost_ = self.result_.cost
        return self

    def transform(self, X):
        check_is_fitted(self, "result_")
        P, _ = _scan_parts(X, None)
        return self.result_.transform.apply(P)

    def predict(self, X=None):
        check_is_fitted(self, "result_")
        return self.vertices_
