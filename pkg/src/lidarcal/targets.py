"""Planar polygon targets placed at the LiDAR origin.

The reference target lies in the y-z plane with its centroid at the origin and
occupies the slab ``|x| <= epsilon``. Points pulled back into this frame are
scored against the resulting region of interest (RoI).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_EPSILON = 0.035


def polygon_centroid(verts) -> np.ndarray:
    """Area centroid of a simple polygon."""
    V = np.asarray(verts, dtype=float)
    x, y = V[:, 0], V[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = cross.sum() / 2.0
    if abs(a) < 1e-15:
        return V.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6.0 * a)
    cy = ((y + yn) * cross).sum() / (6.0 * a)
    return np.array([cx, cy])


def signed_area(verts) -> float:
    V = np.asarray(verts, dtype=float)
    x, y = V[:, 0], V[:, 1]
    return float(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def is_convex(verts, tol=1e-12) -> bool:
    V = np.asarray(verts, dtype=float)
    e = np.roll(V, -1, axis=0) - V
    cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
    return bool(np.all(cross > tol) or np.all(cross < -tol))


@dataclass(frozen=True)
class PolygonTarget:
    """Convex polygon in the (y, z) plane with slab half-thickness ``epsilon``.

    Vertices are stored counterclockwise with the centroid at the origin. Pass
    ``center=False`` to keep the given coordinates (they must already be centered).
    """

    vertices: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        V = np.array(self.vertices, dtype=float)
        if V.ndim != 2 or V.shape[1] != 2 or len(V) < 3:
            raise ValueError("a target needs at least three 2D vertices")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if signed_area(V) < 0:
            V = V[::-1].copy()
        if not is_convex(V):
            raise ValueError("target polygon must be convex")
        c = polygon_centroid(V)
        if np.linalg.norm(c) > 1e-9:
            V = V - c
        V.setflags(write=False)
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def area(self) -> float:
        return signed_area(self.vertices)

    def edge_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.roll(self.vertices, -1, axis=0) - self.vertices, axis=1)

    def vertices_3d(self) -> np.ndarray:
        """Reference vertices ``(0, y, z)`` in the target frame."""
        return np.column_stack([np.zeros(self.n_vertices), self.vertices])

    def with_epsilon(self, epsilon: float) -> "PolygonTarget":
        return PolygonTarget(self.vertices, epsilon)

    def scaled(self, factor: float) -> "PolygonTarget":
        return PolygonTarget(self.vertices * factor, self.epsilon)

    def inradius(self) -> float:
        lines = edge_lines(self)
        return float(np.min(lines.signed_distance(np.zeros((1, 2)))))

    def to_dict(self) -> dict:
        return {"vertices": self.vertices.tolist(), "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d) -> "PolygonTarget":
        return cls(np.asarray(d["vertices"], dtype=float), d.get("epsilon", DEFAULT_EPSILON))


@dataclass(frozen=True)
class EdgeLineSet:
    """Edge lines ``a y + b z + c = 0`` normalized so ``a^2 + b^2 = 1``.

    ``sign`` is +1 or -1 such that ``sign * (a y + b z + c) > 0`` on the interior.
    """

    coeffs: np.ndarray  # (m, 3)
    sign: np.ndarray  # (m,)

    def values(self, yz) -> np.ndarray:
        """Raw ``a y + b z + c`` per point (rows) and edge (columns)."""
        P = np.atleast_2d(np.asarray(yz, dtype=float))
        return P @ self.coeffs[:, :2].T + self.coeffs[:, 2]

    def signed_distance(self, yz) -> np.ndarray:
        """Perpendicular distance per edge, positive on the interior side."""
        return self.values(yz) * self.sign

    def __len__(self):
        return len(self.coeffs)


def edge_lines(target: PolygonTarget) -> EdgeLineSet:
    """Line through each pair of consecutive vertices, wrapping around."""
    V = target.vertices
    Vn = np.roll(V, -1, axis=0)
    y0, z0 = V[:, 0], V[:, 1]
    y1, z1 = Vn[:, 0], Vn[:, 1]
    a = z0 - z1
    b = y1 - y0
    c = z1 * y0 - z0 * y1
    norm = np.hypot(a, b)
    if np.any(norm < 1e-12):
        raise ValueError("duplicate consecutive vertices")
    coeffs = np.column_stack([a, b, c]) / norm[:, None]
    centroid = polygon_centroid(V)
    side = coeffs[:, :2] @ centroid + coeffs[:, 2]
    sign = np.where(side >= 0, 1.0, -1.0)
    return EdgeLineSet(coeffs, sign)


def roi_contains(target: PolygonTarget, lines: EdgeLineSet, p) -> bool:
    """True iff ``p`` lies in the slab ``|x| <= epsilon`` and inside every edge."""
    p = np.asarray(p, dtype=float)
    if abs(p[0]) > target.epsilon:
        return False
    return bool(np.all(lines.signed_distance(p[1:3]) >= 0))


def roi_mask(target: PolygonTarget, lines: EdgeLineSet, points) -> np.ndarray:
    P = np.atleast_2d(np.asarray(points, dtype=float))
    inside = np.all(lines.signed_distance(P[:, 1:3]) >= 0, axis=1)
    return inside & (np.abs(P[:, 0]) <= target.epsilon)


def make_diamond(d: float, epsilon: float = DEFAULT_EPSILON) -> PolygonTarget:
    """Square of side ``d`` rotated 45 degrees in the (y, z) plane."""
    if d <= 0:
        raise ValueError("side length must be positive")
    r = d / np.sqrt(2.0)
    return PolygonTarget(np.array([[r, 0.0], [0.0, r], [-r, 0.0], [0.0, -r]]), epsilon)


def make_square(d: float, epsilon: float = DEFAULT_EPSILON) -> PolygonTarget:
    """Axis-aligned square of side ``d``."""
    h = d / 2.0
    return PolygonTarget(np.array([[h, h], [-h, h], [-h, -h], [h, -h]]), epsilon)


def load_shape(path) -> PolygonTarget:
    with open(path, encoding="utf-8") as fh:
        return PolygonTarget.from_dict(json.load(fh))


def save_shape(target: PolygonTarget, path, **extra) -> None:
    data = target.to_dict()
    data.update(extra)
    Path(path).write_text(json.dumps(data, indent=2), encoding="utf-8")


def optimal_shape_path() -> Path:
    return Path(__file__).parent / "data" / "optimal_shape.json"


def load_optimal_shape(size: float | None = None, epsilon: float | None = None) -> PolygonTarget:
    """Shipped asymmetric quadrilateral, optionally rescaled to ``sqrt(area) == size``."""
    t = load_shape(optimal_shape_path())
    if size is not None:
        t = t.scaled(size / np.sqrt(t.area))
    if epsilon is not None:
        t = t.with_epsilon(epsilon)
    return t


def resolve_shape(shape_ref: str, d: float | None = None, epsilon: float | None = None,
                  base_dir=None) -> PolygonTarget:
    """Build a target from a scene/CLI reference.

    ``"diamond"`` and ``"square"`` take ``d`` as the side length. ``"optimal"`` and
    shape-file paths take ``d`` as ``sqrt(area)`` when given.
    """
    eps = DEFAULT_EPSILON if epsilon is None else epsilon
    if shape_ref == "diamond":
        return make_diamond(d, eps)
    if shape_ref == "square":
        return make_square(d, eps)
    if shape_ref == "optimal":
        t = load_optimal_shape(d)
    else:
        p = Path(shape_ref)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        t = load_shape(p)
        if d is not None:
            t = t.scaled(d / np.sqrt(t.area))
    return t if epsilon is None else t.with_epsilon(epsilon)
