"""Edge-line baseline for diamond targets (the "RN" pipeline).

SVD plane fit, orthogonal projection onto the plane, left/right ring end points,
one RANSAC line per diamond edge, vertices at adjacent line intersections.
Nothing ties the four lines together, so the result need not be a square.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from ._validation import as_cloud
from .simlidar import Scan


class InsufficientEdgePoints(ValueError):
    """An edge of the target has fewer than two edge points."""


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 200
    threshold: float = 0.01
    min_inliers: int = 2
    seed: int | None = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("RANSAC needs at least one iteration")
        if not self.threshold > 0:
            raise ValueError("inlier threshold must be positive")


@dataclass(frozen=True)
class BaselineResult:
    vertices: np.ndarray  # (4, 3): top, left, bottom, right in the plane frame
    normal: np.ndarray
    centroid: np.ndarray
    lines: np.ndarray  # (4, 3) in-plane (a, b, c)
    method: str = "rn"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "vertices": self.vertices.tolist(),
            "normal": self.normal.tolist(),
            "centroid": self.centroid.tolist(),
        }


def fit_plane_svd(cloud):
    """Unit normal (facing the sensor) and centroid of a planar cloud."""
    P = as_cloud(cloud)
    if len(P) < 3:
        raise ValueError("plane fit needs at least three points")
    c = P.mean(axis=0)
    _, s, vt = np.linalg.svd(P - c, full_matrices=False)
    if s[1] <= 1e-9 * max(s[0], 1e-12):
        raise ValueError("points are collinear; plane is undefined")
    n = vt[2]
    if n @ c > 0:
        n = -n
    return n, c


def plane_basis(normal):
    """In-plane (horizontal, vertical) unit axes for a plane with the given normal."""
    n = np.asarray(normal, dtype=float)
    h = np.cross([0.0, 0.0, 1.0], n)
    if np.linalg.norm(h) < 1e-9:
        h = np.cross([0.0, 1.0, 0.0], n)
    h /= np.linalg.norm(h)
    w = np.cross(n, h)
    if w[2] < 0:
        h, w = -h, -w
    return h, w


def project_to_plane(cloud, normal, centroid):
    """2D coordinates of the orthogonal projection onto the plane."""
    P = as_cloud(cloud) - centroid
    h, w = plane_basis(normal)
    return np.column_stack([P @ h, P @ w])


def extract_ring_edges(cloud, rings, normal=None, centroid=None):
    """Left and right end points of each ring along the in-plane horizontal axis.

    Returns a list of ``(point, ring, side)`` with side ``"left"`` or ``"right"``.
    """
    P = as_cloud(cloud)
    rings = np.asarray(rings)
    if normal is None or centroid is None:
        normal, centroid = fit_plane_svd(P)
    h, _ = plane_basis(normal)
    s = (P - centroid) @ h
    out = []
    for r in np.unique(rings):
        idx = np.nonzero(rings == r)[0]
        if len(idx) < 2:
            continue
        out.append((P[idx[np.argmin(s[idx])]], int(r), "left"))
        out.append((P[idx[np.argmax(s[idx])]], int(r), "right"))
    return out


def _tls_line(pts):
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c)
    a, b = vt[-1]
    return np.array([a, b, -(a * c[0] + b * c[1])])


def ransac_line(points, params: RansacParams | None = None):
    """Consensus line ``a x + b y + c = 0`` (unit normal) and its inlier mask."""
    params = params or RansacParams()
    X = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(X) < 2:
        raise ValueError("a line needs at least two points")
    if np.ptp(X, axis=0).max() < 1e-12:
        raise ValueError("all points coincide")
    rng = check_random_state(params.seed)
    best_mask, best_err = None, np.inf
    for _ in range(params.iterations):
        i, j = rng.choice(len(X), 2, replace=False)
        d = X[j] - X[i]
        nrm = np.hypot(*d)
        if nrm < 1e-12:
            continue
        line = np.array([-d[1], d[0], 0.0]) / nrm
        line[2] = -(line[:2] @ X[i])
        res = np.abs(X @ line[:2] + line[2])
        mask = res <= params.threshold
        err = res[mask].sum()
        if best_mask is None or mask.sum() > best_mask.sum() or (
            mask.sum() == best_mask.sum() and err < best_err
        ):
            best_mask, best_err = mask, err
        if len(X) == 2:
            break
    if best_mask is None or best_mask.sum() < params.min_inliers:
        raise ValueError("RANSAC found no consensus line")
    return _tls_line(X[best_mask]), best_mask


def _intersect(l1, l2):
    A = np.array([l1[:2], l2[:2]])
    if abs(np.linalg.det(A)) < 1e-12:
        raise ValueError("edge lines are parallel")
    return np.linalg.solve(A, -np.array([l1[2], l2[2]]))


def _quadrant(angles):
    return np.floor(np.mod(angles, 2 * np.pi) / (np.pi / 2)).astype(int) % 4


def baseline_vertices(cloud, rings, params: RansacParams | None = None,
                      boundary_deg: float = 10.0) -> BaselineResult:
    """Diamond vertices from per-edge RANSAC lines.

    Edges are indexed by the in-plane quadrant of (edge point - centroid):
    0 upper right, 1 upper left, 2 lower left, 3 lower right. Points within
    ``boundary_deg`` of a quadrant boundary are reassigned to the nearest line
    of a provisional fit.
    """
    params = params or RansacParams()
    P = as_cloud(cloud)
    normal, centroid = fit_plane_svd(P)
    edges = extract_ring_edges(P, rings, normal, centroid)
    if not edges:
        raise InsufficientEdgePoints("no ring has two or more points on the target")
    E3 = np.array([e[0] for e in edges])
    E = project_to_plane(E3, normal, centroid)
    ang = np.arctan2(E[:, 1], E[:, 0])
    quad = _quadrant(ang)

    def fit_lines(labels):
        lines = []
        for q in range(4):
            pts = E[labels == q]
            if len(pts) < 2:
                raise InsufficientEdgePoints(
                    f"edge {q} has {len(pts)} edge point(s); at least 2 are needed"
                )
            lines.append(ransac_line(pts, params)[0])
        return np.array(lines)

    lines = fit_lines(quad)
    rel = np.mod(ang, np.pi / 2)
    near = np.minimum(rel, np.pi / 2 - rel) < np.deg2rad(boundary_deg)
    if near.any():
        dist = np.abs(E @ lines[:, :2].T + lines[:, 2])
        relabeled = quad.copy()
        relabeled[near] = np.argmin(dist[near], axis=1)
        try:
            lines = fit_lines(relabeled)
        except InsufficientEdgePoints:
            pass
    corners2d = np.array([
        _intersect(lines[0], lines[1]),
        _intersect(lines[1], lines[2]),
        _intersect(lines[2], lines[3]),
        _intersect(lines[3], lines[0]),
    ])
    h, w = plane_basis(normal)
    verts = centroid + corners2d[:, :1] * h + corners2d[:, 1:] * w
    return BaselineResult(verts, normal, centroid, lines)


class BaselineVertexEstimator(BaseEstimator):
    """scikit-learn style wrapper around :func:`baseline_vertices`."""

    def __init__(self, iterations=200, threshold=0.01, min_inliers=2, random_state=0):
        self.iterations = iterations
        self.threshold = threshold
        self.min_inliers = min_inliers
        self.random_state = random_state

    def fit(self, X, y=None, rings=None):
        if isinstance(X, Scan):
            X, rings = X.points, X.rings
        if rings is None:
            raise ValueError("the baseline needs ring ids")
        params = RansacParams(self.iterations, self.threshold, self.min_inliers, self.random_state)
        self.result_ = baseline_vertices(X, rings, params)
        self.vertices_ = self.result_.vertices
        self.normal_ = self.result_.normal
        return self

    def predict(self, X=None):
        check_is_fitted(self, "result_")
        return self.vertices_
