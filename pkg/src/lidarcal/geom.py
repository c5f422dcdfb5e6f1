"""Transform algebra: SO(3), SE(2), SE(3), Sim(3) and planar projective maps.

Rotations are stored as 3x3 matrices. Anything that needs to optimize over a
rotation uses 3-vector exponential coordinates (axis * angle).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-10
_SE2_SERIES = 1e-7


def hat(w):
    """Skew-symmetric matrix such that ``hat(w) @ v == cross(w, v)``."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula: axis-angle 3-vector to rotation matrix."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def so3_log(R) -> np.ndarray:
    """Inverse of :func:`so3_exp`, returning the axis-angle vector with norm in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        return 0.5 * vee
    if np.pi - theta < 1e-6:
        # sin(theta) ~ 0: take the axis from the symmetric part instead
        vals, vecs = np.linalg.eigh(0.5 * (R + R.T))
        axis = vecs[:, np.argmax(vals)]
        if vee @ axis < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * vee


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation, radians."""
    return float(np.linalg.norm(so3_log(R)))


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_xyz_to_rotation(roll, pitch, yaw) -> np.ndarray:
    """``R_x(roll) @ R_y(pitch) @ R_z(yaw)`` with angles in degrees."""
    r, p, y = np.deg2rad([roll, pitch, yaw])
    return _rx(r) @ _ry(p) @ _rz(y)


def rotation_to_euler_xyz(R) -> np.ndarray:
    """Inverse of :func:`euler_xyz_to_rotation` (degrees), away from gimbal lock."""
    R = np.asarray(R, dtype=float)
    pitch = np.arcsin(np.clip(R[0, 2], -1.0, 1.0))
    roll = np.arctan2(-R[1, 2], R[2, 2])
    yaw = np.arctan2(-R[0, 1], R[0, 0])
    return np.rad2deg([roll, pitch, yaw])


def is_rotation(R, tol=1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol)


@dataclass(frozen=True)
class RigidTransform3:
    """Element of SE(3) acting as ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not is_rotation(R, tol=1e-6):
            raise ValueError("rotation is not in SO(3)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform3":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform3":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_vector(cls, xi) -> "RigidTransform3":
        """Build from ``(w, t)``: exponential coordinates of the rotation, then translation."""
        xi = np.asarray(xi, dtype=float)
        return cls(so3_exp(xi[:3]), xi[3:6])

    @classmethod
    def from_euler(cls, roll, pitch, yaw, translation=(0.0, 0.0, 0.0)) -> "RigidTransform3":
        return cls(euler_xyz_to_rotation(roll, pitch, yaw), translation)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([so3_log(self.rotation), self.translation])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "RigidTransform3":
        Rt = self.rotation.T
        return RigidTransform3(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform3") -> "RigidTransform3":
        """``self * other``: apply ``other`` first."""
        return RigidTransform3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        """Transform an (n, 3) array (or a single 3-vector)."""
        P = np.asarray(points, dtype=float)
        return P @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d) -> "RigidTransform3":
        """Accepts ``{"rotation": 3x3, "translation": 3}``, ``{"euler_xyz_deg": 3, ...}``
        or ``{"axis_angle": 3, ...}``."""
        t = d.get("translation", (0.0, 0.0, 0.0))
        if "rotation" in d:
            return cls(np.asarray(d["rotation"], dtype=float), t)
        if "euler_xyz_deg" in d:
            return cls(euler_xyz_to_rotation(*d["euler_xyz_deg"]), t)
        if "axis_angle" in d:
            return cls(so3_exp(d["axis_angle"]), t)
        raise ValueError(f"cannot read a rigid transform from keys {sorted(d)}")

    def __eq__(self, other):
        if not isinstance(other, RigidTransform3):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def se3_distance(a: RigidTransform3, b: RigidTransform3) -> float:
    """Norm of ``Log(a^-1 b)`` using the (w, t) split, not the full SE(3) log."""
    d = a.inverse() @ b
    return float(np.linalg.norm(np.concatenate([so3_log(d.rotation), d.translation])))


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform ``x -> s R x + t``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("Sim(3) scale must be positive")
        R = np.array(self.rotation, dtype=float)
        if not is_rotation(R, tol=1e-6):
            raise ValueError("rotation is not in SO(3)")
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_vector(cls, p) -> "Sim3Transform":
        """``p = (log s, w0, w1, w2, t0, t1, t2)``."""
        p = np.asarray(p, dtype=float)
        return cls(float(np.exp(p[0])), so3_exp(p[1:4]), p[4:7])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[np.log(self.scale)], so3_log(self.rotation), self.translation])

    def apply(self, points) -> np.ndarray:
        P = np.asarray(points, dtype=float)
        return self.scale * P @ self.rotation.T + self.translation

    def inverse(self) -> "Sim3Transform":
        Rt = self.rotation.T
        return Sim3Transform(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        return Sim3Transform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation
        T[:3, 3] = self.translation
        return T


@dataclass(frozen=True)
class Pose2:
    """Planar rigid motion: rotate by ``angle`` then translate by ``(tx, ty)``."""

    angle: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def as_matrix(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return np.array([[c, -s, self.tx], [s, c, self.ty], [0.0, 0.0, 1.0]])

    def apply(self, pts) -> np.ndarray:
        P = np.asarray(pts, dtype=float)
        c, s = np.cos(self.angle), np.sin(self.angle)
        R = np.array([[c, -s], [s, c]])
        return P @ R.T + np.array([self.tx, self.ty])


@dataclass(frozen=True)
class TwistSE2:
    """Unit direction ``(omega, u, v)`` in se(2)."""

    omega: float
    u: float
    v: float

    def __post_init__(self):
        n = np.sqrt(self.omega**2 + self.u**2 + self.v**2)
        if abs(n - 1.0) > 1e-12:
            raise ValueError(f"twist must lie on the unit sphere, got norm {n}")

    @classmethod
    def normalized(cls, omega, u, v) -> "TwistSE2":
        n = np.sqrt(omega**2 + u**2 + v**2)
        if n == 0:
            raise ValueError("zero twist has no direction")
        return cls(omega / n, u / n, v / n)

    def as_array(self) -> np.ndarray:
        return np.array([self.omega, self.u, self.v])


def se2_exp(kappa: float, twist: TwistSE2) -> Pose2:
    """Closed-form ``expm(kappa * [[0,-w,u],[w,0,v],[0,0,0]])``."""
    w, u, v = twist.omega, twist.u, twist.v
    theta = w * kappa
    if abs(w) < _SE2_SERIES:
        # second-order expansion in theta of the closed form below
        tx = kappa * (u - 0.5 * v * theta)
        ty = kappa * (v + 0.5 * u * theta)
    else:
        tx = (v * np.cos(theta) + u * np.sin(theta) - v) / w
        ty = (v * np.sin(theta) - u * np.cos(theta) + u) / w
    return Pose2(float(theta), float(tx), float(ty))


@dataclass(frozen=True)
class ProjectiveMap2:
    """Non-singular 3x3 homography acting on the plane."""

    matrix: np.ndarray

    def __post_init__(self):
        M = np.array(self.matrix, dtype=float)
        if M.shape != (3, 3):
            raise ValueError("projective map must be 3x3")
        if abs(np.linalg.det(M)) <= 1e-12:
            raise ValueError("projective map is singular")
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)

    def denominators(self, pts) -> np.ndarray:
        """``p31 x + p32 y + upsilon`` for each point; all positive keeps convex sets convex."""
        P = np.atleast_2d(np.asarray(pts, dtype=float))
        return P @ self.matrix[2, :2] + self.matrix[2, 2]


def projective_from_params(k, lam, v, upsilon) -> ProjectiveMap2:
    """Shear * anisotropic scale * elation, with the similarity factor fixed to identity.

    Five free parameters: shear ``k``, scale ``lam`` (x by lam, y by 1/lam), elation
    row ``v`` and ``upsilon``.
    """
    if lam == 0:
        raise ValueError("scale factor lambda must be non-zero")
    if upsilon == 0:
        raise ValueError("upsilon must be non-zero")
    v = np.asarray(v, dtype=float).reshape(2)
    shear = np.array([[1.0, k, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    scale = np.diag([lam, 1.0 / lam, 1.0])
    elation = np.eye(3)
    elation[2, :2] = v
    elation[2, 2] = upsilon
    return ProjectiveMap2(shear @ scale @ elation)


def projective_apply(P: ProjectiveMap2, pts) -> np.ndarray:
    """Map 2D points through ``P`` and dehomogenize."""
    X = np.atleast_2d(np.asarray(pts, dtype=float))
    H = np.column_stack([X, np.ones(len(X))]) @ P.matrix.T
    lam = H[:, 2]
    if np.any(np.abs(lam) < 1e-12):
        raise ValueError("point maps to the line at infinity")
    return H[:, :2] / lam[:, None]
