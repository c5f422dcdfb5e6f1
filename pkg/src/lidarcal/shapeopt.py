"""Design of an asymmetric quadrilateral target for sparse ring sampling.

Candidate shapes are projective images of a nominal square. A shape is scored
by how much its ring edge points move under small planar rigid motions (worst
case over motion directions), plus the widths it presents to each ring, under
several in-plane rotations and partial (strip) illuminations.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import minimize
from sklearn.utils import check_random_state

from .geom import ProjectiveMap2, TwistSE2, projective_apply, projective_from_params
from .targets import PolygonTarget, is_convex, polygon_centroid, signed_area

NOMINAL_SQUARE = np.array([[0.5, -0.5], [0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5]])
IDENTITY_PARAMS = np.array([0.0, 1.0, 0.0, 0.0, 1.0])


class InfeasibleShape(ValueError):
    pass


@dataclass(frozen=True)
class ShapeScoreConfig:
    n_rotations: int = 6
    n_strips: int = 5
    rings_per_strip: int = 4
    sphere_grid: tuple = (25, 25)
    mu: float = 0.1

    def __post_init__(self):
        if self.n_rotations < 1 or self.n_strips < 1 or self.rings_per_strip < 1:
            raise ValueError("rotation, strip and ring counts must be at least 1")
        if self.sphere_grid[0] < 2 or self.sphere_grid[1] < 2:
            raise ValueError("twist sphere grid must be at least 2x2")

    @classmethod
    def from_dict(cls, d) -> "ShapeScoreConfig":
        kw = dict(d)
        if "sphere_grid" in kw:
            kw["sphere_grid"] = tuple(kw["sphere_grid"])
        return cls(**kw)


@dataclass(frozen=True)
class CandidateShape:
    params: np.ndarray  # (k, lambda, v1, v2, upsilon)
    vertices: np.ndarray  # (4, 2), CCW, centroid at origin, unit area
    width: float
    height: float

    def as_target(self, size: float = 1.0, epsilon: float = 0.035) -> PolygonTarget:
        return PolygonTarget(self.vertices * size, epsilon)


def twist_sphere(grid=(25, 25)) -> np.ndarray:
    """Unit twists ``(omega, u, v)`` on a polar/azimuth grid, shape ``(n, 3)``."""
    na, nb = grid
    a = np.linspace(0.0, np.pi, na)
    b = np.linspace(0.0, 2 * np.pi, nb, endpoint=False)
    A, B = np.meshgrid(a, b, indexing="ij")
    T = np.stack([np.cos(A), np.sin(A) * np.cos(B), np.sin(A) * np.sin(B)], axis=-1).reshape(-1, 3)
    return T


def ring_edge_points(verts, ring_heights):
    """Intersections of horizontal rings ``y = y_r`` with the polygon's edges.

    Returns ``(points, edge_index, ring_index)``. Each edge covers the half-open
    span ``[min y, max y)`` so a ring through a shared vertex is counted once;
    horizontal edges are skipped.
    """
    V = np.asarray(verts, dtype=float)
    Vn = np.roll(V, -1, axis=0)
    y = np.asarray(ring_heights, dtype=float).reshape(-1)
    x0, y0 = V[:, 0][None, :], V[:, 1][None, :]
    x1, y1 = Vn[:, 0][None, :], Vn[:, 1][None, :]
    yr = y[:, None]
    dy = y1 - y0
    lo, hi = np.minimum(y0, y1), np.maximum(y0, y1)
    hit = (np.abs(dy) >= 1e-12) & (yr >= lo) & (yr < hi)
    ring_idx, edge_idx = np.nonzero(hit)
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = x0 + (x1 - x0) / dy * (yr - y0)
    pts = np.column_stack([xs[ring_idx, edge_idx], y[ring_idx]])
    return pts, edge_idx, ring_idx


def _gradient_terms(p0, p1, y_r):
    """``(A, B)`` with ``v_x = omega * A + u + v * B`` for the edge ``p0 -> p1``.

    ``B`` is minus the inverse slope: lifting the shape by ``v`` moves the ring
    crossing to where the edge sat ``v`` lower.
    """
    xi, yi = p0[..., 0], p0[..., 1]
    xj, yj = p1[..., 0], p1[..., 1]
    A = (xi - xj) * (xi * yj - yi * xj + xj * y_r - xi * y_r) / (yi - yj) ** 2 - y_r
    B = -(xj - xi) / (yj - yi)
    return A, B


def edge_gradient(p0, p1, y_r, twist: TwistSE2) -> float:
    """Rate at which the ring edge point on edge ``p0 -> p1`` slides along the ring."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    if abs(p1[1] - p0[1]) < 1e-12:
        raise ValueError("horizontal edge has no ring crossing")
    A, B = _gradient_terms(p0, p1, y_r)
    return float(twist.omega * A + twist.u + twist.v * B)


def _edge_features(verts, ring_heights):
    """Per edge point ``[A, 1, B]`` rows and the per-ring chord lengths."""
    V = np.asarray(verts, dtype=float)
    pts, e, r = ring_edge_points(V, ring_heights)
    if len(pts) == 0:
        return np.zeros((0, 3)), np.zeros(0)
    A, B = _gradient_terms(V[e], np.roll(V, -1, axis=0)[e], pts[:, 1])
    F = np.column_stack([A, np.ones_like(A), B])
    chords = []
    for k in np.unique(r):
        xs = pts[r == k, 0]
        if len(xs) >= 2:
            chords.append(xs.max() - xs.min())
    return F, np.asarray(chords)


def _extent(verts):
    V = np.asarray(verts, dtype=float)
    return float(np.ptp(V[:, 0])), float(np.ptp(V[:, 1]))


def sensitivity(verts, ring_heights, twist: TwistSE2) -> float:
    """``(1/h) * sum v_x^2`` over the ring edge points; 0 without edge points."""
    F, _ = _edge_features(verts, ring_heights)
    if len(F) == 0:
        return 0.0
    _, h = _extent(verts)
    v = F @ twist.as_array()
    return float(v @ v / h)


def shape_score(verts, ring_heights, twist: TwistSE2, mu: float = 1.0) -> float:
    """``w * sensitivity + mu * sum of ring chord lengths``."""
    F, chords = _edge_features(verts, ring_heights)
    if len(F) == 0:
        return 0.0
    w, h = _extent(verts)
    v = F @ twist.as_array()
    return float(w * (v @ v) / h + mu * chords.sum())


def rotate2(verts, angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.asarray(verts, dtype=float) @ np.array([[c, -s], [s, c]]).T


def strip_rings(verts, n_strips, rings_per_strip):
    """Ring heights for each of ``n_strips`` equal horizontal bands of the bounding box."""
    y = np.asarray(verts, dtype=float)[:, 1]
    lo, hi = y.min(), y.max()
    dh = (hi - lo) / n_strips
    offs = (np.arange(rings_per_strip) + 0.5) / rings_per_strip
    return [lo + dh * (j + offs) for j in range(n_strips)]


def score_grid(verts, config: ShapeScoreConfig, twists=None) -> np.ndarray:
    """Worst-case-over-twist score for every (rotation, strip) cell; shape ``(n, m)``."""
    T = twist_sphere(config.sphere_grid) if twists is None else twists
    V0 = np.asarray(verts, dtype=float) - polygon_centroid(verts)
    out = np.zeros((config.n_rotations, config.n_strips))
    for i in range(config.n_rotations):
        Vr = rotate2(V0, 2 * np.pi * i / config.n_rotations)
        w, h = _extent(Vr)
        for j, rings in enumerate(strip_rings(Vr, config.n_strips, config.rings_per_strip)):
            F, chords = _edge_features(Vr, rings)
            if len(F) == 0:
                out[i, j] = 0.0
                continue
            G = F.T @ F
            quad = np.einsum("ij,jk,ik->i", T, G, T)
            out[i, j] = w * quad.min() / h + config.mu * chords.sum()
    return out


def robust_score(verts, config: ShapeScoreConfig | None = None) -> float:
    """Lowest score over all rotations and illumination strips."""
    return float(score_grid(verts, config or ShapeScoreConfig()).min())


def normalize_shape(verts) -> np.ndarray:
    """CCW, centroid at the origin, unit area."""
    V = np.asarray(verts, dtype=float)
    if signed_area(V) < 0:
        V = V[::-1]
    V = V - polygon_centroid(V)
    return V / np.sqrt(signed_area(V))


def candidate_from_params(params, nominal=NOMINAL_SQUARE) -> CandidateShape:
    """Apply the 5-parameter projective map to the nominal square."""
    k, lam, v1, v2, ups = np.asarray(params, dtype=float)
    if lam <= 0:
        raise InfeasibleShape("scale must be positive")
    try:
        P: ProjectiveMap2 = projective_from_params(k, lam, (v1, v2), ups)
    except ValueError as exc:
        raise InfeasibleShape(str(exc)) from exc
    if np.any(P.denominators(nominal) <= 0):
        raise InfeasibleShape("convexity constraint violated")
    V = projective_apply(P, nominal)
    if abs(signed_area(V)) < 1e-9 or not is_convex(V):
        raise InfeasibleShape("degenerate candidate")
    V = normalize_shape(V)
    w, h = _extent(V)
    return CandidateShape(np.asarray(params, dtype=float), V, w, h)


def _random_params(rng):
    while True:
        p = np.array([
            rng.uniform(-1.0, 1.0),
            np.exp(rng.uniform(-0.5, 0.5)),
            rng.uniform(-0.8, 0.8),
            rng.uniform(-0.8, 0.8),
            rng.uniform(0.5, 1.5),
        ])
        try:
            candidate_from_params(p)
            return p
        except InfeasibleShape:
            continue


def optimize_shape(config: ShapeScoreConfig | None = None, seed=0, restarts: int = 4,
                   min_edge_ratio: float = 0.1, maxiter: int = 1500) -> CandidateShape:
    """Maximize :func:`robust_score` over the projective parameters.

    Restart 0 starts from the identity map (the nominal square); later restarts
    start from random feasible parameters. Infeasible parameters, and shapes
    with an edge shorter than ``min_edge_ratio`` times the width, score -inf.
    """
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    config = config or ShapeScoreConfig()
    rng = check_random_state(seed)
    twists = twist_sphere(config.sphere_grid)

    def neg(p):
        try:
            c = candidate_from_params(p)
        except InfeasibleShape:
            return np.inf
        edges = np.linalg.norm(np.roll(c.vertices, -1, axis=0) - c.vertices, axis=1)
        if edges.min() < min_edge_ratio * c.width:
            return np.inf
        return -float(score_grid(c.vertices, config, twists).min())

    best = None
    for r in range(restarts):
        x0 = IDENTITY_PARAMS.copy() if r == 0 else _random_params(rng)
        f0 = neg(x0)
        if not np.isfinite(f0):
            continue
        simplex = x0 + np.vstack([np.zeros(5), 0.1 * np.eye(5)])
        res = minimize(neg, x0, method="Nelder-Mead",
                       options={"initial_simplex": simplex, "maxiter": maxiter,
                                "xatol": 1e-6, "fatol": 1e-9})
        x, fx = (res.x, res.fun) if res.fun <= f0 else (x0, f0)
        if np.isfinite(fx) and (best is None or fx < best[0]):
            best = (fx, x)
    if best is None:
        raise InfeasibleShape("every restart was infeasible")
    return candidate_from_params(best[1])


def rigid_residual_2d(A, B) -> float:
    """RMS residual after the best proper rotation + translation taking A onto B."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    a, b = A - A.mean(axis=0), B - B.mean(axis=0)
    U, _, Vt = np.linalg.svd(a.T @ b)
    D = np.diag([1.0, np.sign(np.linalg.det(U @ Vt))])
    R = (U @ D @ Vt).T
    return float(np.sqrt(np.mean(np.sum((a @ R.T - b) ** 2, axis=1))))


def is_asymmetric(verts, tol: float = 1e-3) -> bool:
    """True if no non-identity vertex relabeling is reachable by a rigid motion."""
    V = np.asarray(verts, dtype=float)
    n = len(V)
    for perm in permutations(range(n)):
        if perm == tuple(range(n)):
            continue
        if rigid_residual_2d(V, V[list(perm)]) < tol:
            return False
    return True
