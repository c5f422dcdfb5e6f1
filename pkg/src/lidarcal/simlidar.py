"""Synthetic spinning-LiDAR scans of posed planar targets.

The LiDAR frame is x forward, y left, z up. A ring at elevation ``e`` sweeps
rays ``(cos e cos a, cos e sin a, sin e)`` over azimuth ``a``. Range bias and
noise are applied along the ray.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import RigidTransform3
from .targets import PolygonTarget, edge_lines


def default_ring_elevations() -> np.ndarray:
    """32 elevations in degrees: 25 rings 1/3 deg apart in [-5, 3], 7 sparse rings outside."""
    dense = np.linspace(-5.0, 3.0, 25)
    below = [-25.0, -5.0 - 3 * 1.36, -5.0 - 2 * 1.36, -5.0 - 1.36]
    above = [3.0 + 1.36, 3.0 + 2 * 1.36, 15.0]
    return np.concatenate([below, dense, above])


@dataclass(frozen=True)
class LidarSpec:
    elevations: np.ndarray = field(default_factory=default_ring_elevations)
    azimuth_step: float = 0.4
    noise_sigma: float = 0.0
    ring_bias: np.ndarray | None = None
    azimuth_min: float = -180.0
    azimuth_max: float = 180.0

    def __post_init__(self):
        e = np.array(self.elevations, dtype=float).reshape(-1)
        if len(e) == 0 or np.any(np.diff(e) <= 0):
            raise ValueError("ring elevations must be strictly increasing")
        if not self.azimuth_step > 0:
            raise ValueError("azimuth step must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        bias = np.zeros(len(e)) if self.ring_bias is None else np.array(self.ring_bias, dtype=float)
        if bias.shape != e.shape:
            raise ValueError("ring bias needs one entry per ring")
        e.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "elevations", e)
        object.__setattr__(self, "ring_bias", bias)

    @property
    def n_rings(self) -> int:
        return len(self.elevations)

    def azimuths(self, offset: float = 0.0) -> np.ndarray:
        n = int(np.floor((self.azimuth_max - self.azimuth_min) / self.azimuth_step + 1e-9))
        return self.azimuth_min + offset + self.azimuth_step * np.arange(n)

    def to_dict(self) -> dict:
        return {
            "elevations": self.elevations.tolist(),
            "azimuth_step": self.azimuth_step,
            "noise_sigma": self.noise_sigma,
            "ring_bias": self.ring_bias.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "LidarSpec":
        kw = {}
        if "elevations" in d:
            kw["elevations"] = np.asarray(d["elevations"], dtype=float)
        for key in ("azimuth_step", "noise_sigma", "azimuth_min", "azimuth_max"):
            if key in d:
                kw[key] = float(d[key])
        if d.get("ring_bias") is not None:
            kw["ring_bias"] = np.asarray(d["ring_bias"], dtype=float)
        return cls(**kw)


@dataclass(frozen=True)
class Scan:
    points: np.ndarray  # (n, 3)
    rings: np.ndarray  # (n,) int
    intensity: np.ndarray  # (n,)
    index: int = 0

    def __post_init__(self):
        P = np.array(self.points, dtype=float).reshape(-1, 3)
        r = np.array(self.rings, dtype=int).reshape(-1)
        i = np.array(self.intensity, dtype=float).reshape(-1)
        if not len(P) == len(r) == len(i):
            raise ValueError("points, rings and intensity must have equal length")
        for a in (P, r, i):
            a.setflags(write=False)
        object.__setattr__(self, "points", P)
        object.__setattr__(self, "rings", r)
        object.__setattr__(self, "intensity", i)

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls, index: int = 0) -> "Scan":
        return cls(np.zeros((0, 3)), np.zeros(0, int), np.zeros(0), index)

    def ring_ids(self) -> np.ndarray:
        return np.unique(self.rings)

    def subset(self, mask) -> "Scan":
        return Scan(self.points[mask], self.rings[mask], self.intensity[mask], self.index)

    def with_points(self, points) -> "Scan":
        return replace(self, points=np.asarray(points, dtype=float))


def concat_scans(scans) -> Scan:
    scans = list(scans)
    if not scans:
        return Scan.empty()
    return Scan(
        np.concatenate([s.points for s in scans]),
        np.concatenate([s.rings for s in scans]),
        np.concatenate([s.intensity for s in scans]),
        scans[0].index,
    )


def ray_directions(elevations_deg, azimuths_deg) -> np.ndarray:
    """Unit rays, shape ``(n_rings, n_azimuths, 3)``."""
    e = np.deg2rad(np.asarray(elevations_deg, dtype=float))[:, None]
    a = np.deg2rad(np.asarray(azimuths_deg, dtype=float))[None, :]
    ce = np.cos(e)
    return np.stack(np.broadcast_arrays(ce * np.cos(a), ce * np.sin(a), np.sin(e)), axis=-1)


def simulate_scan(spec: LidarSpec, target: PolygonTarget, pose: RigidTransform3, seed=0,
                  azimuth_offset: float = 0.0, index: int = 0) -> Scan:
    """Cast every ring/azimuth ray at the target plane and keep hits inside the polygon.

    ``pose`` maps target coordinates into the LiDAR frame. Hits are then moved
    along their rays by the per-ring bias and Gaussian range noise of ``spec``.
    """
    R, t = pose.rotation, pose.translation
    normal = R[:, 0]
    offset = normal @ t
    if abs(offset) < 1e-12:
        raise ValueError("target plane passes through the sensor origin")
    dirs = ray_directions(spec.elevations, spec.azimuths(azimuth_offset))
    denom = dirs @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        rng_ = np.where(np.abs(denom) > 1e-12, offset / denom, -1.0)
    hit = rng_ > 0
    ring_idx, az_idx = np.nonzero(hit)
    ranges = rng_[ring_idx, az_idx]
    d = dirs[ring_idx, az_idx]
    local = (ranges[:, None] * d - t) @ R
    lines = edge_lines(target)
    inside = np.all(lines.signed_distance(local[:, 1:3]) >= 0, axis=1)
    ring_idx, ranges, d = ring_idx[inside], ranges[inside], d[inside]
    if len(ranges) == 0:
        return Scan.empty(index)
    rng = np.random.default_rng(seed)
    ranges = ranges + spec.ring_bias[ring_idx]
    if spec.noise_sigma > 0:
        ranges = ranges + rng.normal(0.0, spec.noise_sigma, len(ranges))
    pts = ranges[:, None] * d
    return Scan(pts, ring_idx, np.full(len(pts), 100.0), index)


def perturb_scan(scan: Scan, per_ring_bias, sigma: float, seed=0) -> Scan:
    """Move every point along its ray by its ring's bias plus N(0, sigma^2)."""
    bias = np.asarray(per_ring_bias, dtype=float)
    if len(scan) and scan.rings.max() >= len(bias):
        raise ValueError("bias list shorter than the ring count")
    P = scan.points
    r = np.linalg.norm(P, axis=1)
    dirs = P / np.where(r > 0, r, 1.0)[:, None]
    dr = bias[scan.rings]
    if sigma > 0:
        dr = dr + np.random.default_rng(seed).normal(0.0, sigma, len(P))
    return scan.with_points(P + dr[:, None] * dirs)


def quantization_error(distance: float, spec: LidarSpec | None = None) -> float:
    """Spacing of adjacent returns on one ring at ``distance`` (azimuth step times range)."""
    if distance <= 0:
        raise ValueError("distance must be positive")
    step = 0.4 if spec is None else spec.azimuth_step
    return float(distance * np.deg2rad(step))


def write_scan_csv(scan: Scan, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "ring", "intensity"])
        for p, r, i in zip(scan.points, scan.rings, scan.intensity):
            w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), int(r), repr(float(i))])


def read_scan_csv(path) -> Scan:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"x", "y", "z", "ring"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = list(reader)
    if not rows:
        return Scan.empty()
    pts = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])
    rings = np.array([int(r["ring"]) for r in rows])
    inten = np.array([float(r.get("intensity") or 0.0) for r in rows])
    return Scan(pts, rings, inten)
