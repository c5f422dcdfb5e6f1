"""Pinhole projection of LiDAR points and vertex/corner ordering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import RigidTransform3


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float = 0.0
    cy: float = 0.0
    s: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, self.s, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "s": self.s, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d.get("cx", 0.0)),
                   float(d.get("cy", 0.0)), float(d.get("s", 0.0)))


def project_points(X, extrinsic: RigidTransform3, K: CameraIntrinsics) -> np.ndarray:
    """Project LiDAR-frame points to pixels; shape (n, 2)."""
    P = np.atleast_2d(np.asarray(X, dtype=float))
    h = extrinsic.apply(P) @ K.K.T
    w = h[:, 2]
    if np.any(w <= 1e-9):
        raise BehindCameraError("point is behind the camera")
    return h[:, :2] / w[:, None]


def project_point(X, extrinsic: RigidTransform3, K: CameraIntrinsics) -> np.ndarray:
    return project_points(np.asarray(X, dtype=float).reshape(1, 3), extrinsic, K)[0]


def _extreme_order(pix):
    """Indices of (top, right, bottom, left) for four image points.

    Image v grows downward, so top is the smallest v.
    """
    pix = np.asarray(pix, dtype=float)
    order = []
    used = set()
    for key in (lambda p: p[:, 1], lambda p: -p[:, 0], lambda p: -p[:, 1], lambda p: p[:, 0]):
        vals = key(pix)
        cand = [i for i in np.argsort(vals, kind="stable") if i not in used]
        i = cand[0]
        if len(cand) > 1 and abs(vals[cand[1]] - vals[i]) < 1.0 and np.linalg.norm(
            pix[cand[1]] - pix[i]
        ) < 1.0:
            raise ValueError("corner ordering is ambiguous: two points coincide within 1 px")
        used.add(i)
        order.append(i)
    return np.array(order)


def sort_correspondences(lidar_vertices, image_corners, K: CameraIntrinsics,
                         extrinsic_guess: RigidTransform3) -> np.ndarray:
    """Permutation ``perm`` such that ``image_corners[perm[i]]`` pairs with ``lidar_vertices[i]``.

    Both sets are sorted into top/right/bottom/left; the LiDAR vertices are
    projected with the extrinsic guess first.
    """
    V = np.asarray(lidar_vertices, dtype=float).reshape(-1, 3)
    C = np.asarray(image_corners, dtype=float).reshape(-1, 2)
    if len(V) != 4 or len(C) != 4:
        raise ValueError("need exactly four vertices and four corners")
    lv = _extreme_order(project_points(V, extrinsic_guess, K))
    ic = _extreme_order(C)
    perm = np.empty(4, dtype=int)
    perm[lv] = ic
    return perm
