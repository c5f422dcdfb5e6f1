import numpy as np
import pytest

from lidarcal.geom import RigidTransform3
from lidarcal.shapeopt import is_asymmetric
from lidarcal.simlidar import (
    LidarSpec, Scan, concat_scans, perturb_scan, quantization_error, read_scan_csv, simulate_scan,
    write_scan_csv,
)
from lidarcal.targets import (
    PolygonTarget, edge_lines, load_optimal_shape, make_diamond, make_square, resolve_shape, roi_contains,
    roi_mask, save_shape,
)


def face_on(distance):
    return RigidTransform3(np.eye(3), [distance, 0.0, 0.0])


def test_square_edge_lines():
    L = edge_lines(make_square(1.0))
    yz = np.array([[0.5, 0.0], [-0.5, 0.0], [0.0, 0.5], [0.0, -0.5]])
    # every axis point lies on exactly one line
    assert np.allclose(np.sort(np.abs(L.values(yz)).min(axis=1)), 0.0)
    assert np.all(L.signed_distance([[0.0, 0.0]]) > 0)
    assert np.allclose(L.signed_distance([[0.0, 0.0]]), 0.5)


def test_diamond_edge_lines():
    d = 0.8
    L = edge_lines(make_diamond(d))
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.uniform(0, 2 * np.pi)
        # point on |y| + |z| = d / sqrt(2)
        y, z = np.cos(a), np.sin(a)
        p = np.array([y, z]) * (d / np.sqrt(2)) / (abs(y) + abs(z))
        assert np.isclose(np.abs(L.values(p)).min(), 0.0, atol=1e-12)


def test_optimal_shape_vertices_on_adjacent_lines():
    t = load_optimal_shape()
    L = edge_lines(t)
    V = L.values(t.vertices)
    m = t.n_vertices
    for i in range(m):
        assert abs(V[i, i]) < 1e-12 and abs(V[i, (i - 1) % m]) < 1e-12


def test_shipped_optimal_shape_properties():
    t = load_optimal_shape()
    assert np.isclose(t.area, 1.0)
    assert is_asymmetric(t.vertices)
    w = np.ptp(t.vertices[:, 0])
    assert t.edge_lengths().min() > 0.1 * w
    big = load_optimal_shape(size=0.8)
    assert np.isclose(big.area, 0.64)


def test_roi_examples():
    t = make_diamond(1.0)
    L = edge_lines(t)
    assert roi_contains(t, L, [0, 0, 0])
    assert not roi_contains(t, L, [2 * t.epsilon, 0, 0])


def test_roi_matches_half_plane_oracle():
    t = load_optimal_shape(size=1.0)
    L = edge_lines(t)
    rng = np.random.default_rng(3)
    P = rng.uniform(-0.8, 0.8, size=(1000, 3)) * [0.05, 1, 1]
    V = t.vertices
    expect = []
    for p in P:
        inside = abs(p[0]) <= t.epsilon
        for i in range(len(V)):
            a, b = V[i], V[(i + 1) % len(V)]
            cross = (b[0] - a[0]) * (p[2] - a[1]) - (b[1] - a[1]) * (p[1] - a[0])
            inside &= cross >= 0
        expect.append(inside)
    assert np.array_equal(roi_mask(t, L, P), np.array(expect))


def test_diamond_examples():
    assert np.isclose(make_diamond(1.0).vertices[:, 0].max(), 0.7071, atol=1e-4)
    assert np.isclose(make_diamond(0.805).area, 0.805**2)
    assert np.isclose(make_diamond(0.158).area, 0.158**2)


def test_polygon_target_validation():
    with pytest.raises(ValueError):
        PolygonTarget(np.array([[0, 0], [1, 0], [0.2, 0.2], [0, 1.0]]))
    with pytest.raises(ValueError):
        PolygonTarget(np.array([[0, 0], [1, 0.0]]))
    t = PolygonTarget(np.array([[0, 0], [0, 1], [1, 1], [1, 0.0]]))  # clockwise, off-center
    assert t.area > 0 and np.allclose(t.vertices.mean(axis=0), 0)


def test_shape_file_roundtrip(tmp_path):
    t = make_diamond(0.5, 0.02)
    save_shape(t, tmp_path / "s.json")
    u = resolve_shape(str(tmp_path / "s.json"))
    assert np.allclose(u.vertices, t.vertices) and u.epsilon == 0.02
    assert np.isclose(resolve_shape("s.json", d=1.0, base_dir=tmp_path).area, 1.0)


@pytest.mark.parametrize("distance,paper_count",
                         [(2.0, 2530), (4.0, 1068), (8.0, 356), (16.0, 95), (30.0, 28)])
def test_point_counts_near_simulation_table(distance, paper_count):
    scan = simulate_scan(LidarSpec(), make_diamond(1.0), face_on(distance))
    assert abs(len(scan) - paper_count) <= 0.15 * paper_count


def test_target_outside_rings_is_empty():
    scan = simulate_scan(LidarSpec(), make_square(0.5), RigidTransform3(np.eye(3), [2.0, 0.0, 10.0]))
    assert len(scan) == 0


def test_noise_free_points_on_plane():
    pose = RigidTransform3.from_euler(10, 20, 30, [5.0, 0.5, 0.2])
    scan = simulate_scan(LidarSpec(), make_diamond(1.0), pose)
    n = pose.rotation[:, 0]
    assert len(scan) > 100
    assert np.max(np.abs((scan.points - pose.translation) @ n)) < 1e-10


def test_plane_through_origin_rejected():
    with pytest.raises(ValueError):
        simulate_scan(LidarSpec(), make_square(1.0), RigidTransform3(np.eye(3), [0.0, 1.0, 0.0]))


def test_quantization_examples():
    assert np.isclose(quantization_error(30.0), 0.209, atol=1e-3)
    assert np.isclose(quantization_error(2.0), 0.014, atol=1e-3)
    assert np.isclose(quantization_error(1e-4), 7e-7, rtol=0.01)
    assert np.isclose(quantization_error(8.0), 0.056, atol=1e-3)


def test_perturb_scan_examples():
    scan = simulate_scan(LidarSpec(), make_square(1.0), face_on(4.0))
    same = perturb_scan(scan, np.zeros(32), 0.0)
    assert np.array_equal(same.points, scan.points)
    grown = perturb_scan(scan, np.full(32, 0.05), 0.0)
    dr = np.linalg.norm(grown.points, axis=1) - np.linalg.norm(scan.points, axis=1)
    assert np.allclose(dr, 0.05, atol=1e-9)
    alt = perturb_scan(scan, np.where(np.arange(32) % 2, 0.03, -0.03), 0.0)
    thickness = np.ptp(alt.points[:, 0])
    assert 0.055 <= thickness <= 0.075


def test_ring_bias_in_spec_matches_perturb():
    bias = np.linspace(-0.03, 0.03, 32)
    a = simulate_scan(LidarSpec(ring_bias=bias), make_square(1.0), face_on(4.0))
    b = perturb_scan(simulate_scan(LidarSpec(), make_square(1.0), face_on(4.0)), bias, 0.0)
    assert np.allclose(a.points, b.points)


def test_scan_csv_roundtrip(tmp_path):
    scan = simulate_scan(LidarSpec(noise_sigma=0.01), make_diamond(0.8), face_on(3.0), seed=4)
    write_scan_csv(scan, tmp_path / "s.csv")
    back = read_scan_csv(tmp_path / "s.csv")
    assert np.array_equal(back.points, scan.points) and np.array_equal(back.rings, scan.rings)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "x,y,z,ring,intensity"


def test_noise_is_seeded():
    spec = LidarSpec(noise_sigma=0.01)
    a = simulate_scan(spec, make_square(1.0), face_on(4.0), seed=1)
    b = simulate_scan(spec, make_square(1.0), face_on(4.0), seed=1)
    c = simulate_scan(spec, make_square(1.0), face_on(4.0), seed=2)
    assert np.array_equal(a.points, b.points) and not np.array_equal(a.points, c.points)


def test_scan_helpers():
    e = Scan.empty()
    assert len(e) == 0
    s = simulate_scan(LidarSpec(), make_square(1.0), face_on(4.0))
    both = concat_scans([s, s])
    assert len(both) == 2 * len(s)
    assert len(s.subset(s.rings == s.rings[0])) > 0
    with pytest.raises(ValueError):
        LidarSpec(elevations=[1.0, 0.0])
