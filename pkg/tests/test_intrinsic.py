import warnings

import numpy as np
import pytest

from lidarcal.geom import RigidTransform3, Sim3Transform, so3_exp
from lidarcal.harness import intrinsic_scene
from lidarcal.intrinsic import (
    BL1Params, BL2Params, PlacementWarning, RingIntrinsicCalibrator, SphericalPoint, TargetPlane, bl1_correct,
    bl2_correct, bl2_decomposed, calibrate_rings, cart_sph_convert, cartesian_to_spherical, intersection_points,
    p2p_cost, placement_from_planes, placement_matrix, plane_from_pose, plane_from_vertices, spherical_to_cartesian,
)
from lidarcal.simlidar import LidarSpec

FOUR_RINGS = [-4.0, -1.0, 2.0, 5.0]


def test_spherical_examples():
    s = cart_sph_convert([0, 1, 0])
    assert (s.rho, s.theta, s.phi) == pytest.approx((1.0, 0.0, 0.0))
    assert cart_sph_convert([0, 0, 1]).theta == pytest.approx(np.pi / 2)
    assert cart_sph_convert([1, 0, 0]).phi == pytest.approx(np.pi / 2)
    with pytest.raises(ValueError):
        cart_sph_convert([0, 0, 0])
    with pytest.raises(ValueError):
        SphericalPoint(-1.0, 0.0, 0.0)


def test_spherical_round_trip():
    P = np.random.default_rng(0).normal(size=(1000, 3)) * 5
    assert np.max(np.abs(spherical_to_cartesian(cartesian_to_spherical(P)) - P)) < 1e-12


def test_bl1_examples():
    raw = SphericalPoint(5.0, 0.3, np.pi / 2)
    assert np.allclose(bl1_correct(raw, BL1Params()), [5, 0, 0], atol=1e-12)
    raw = SphericalPoint(5.0, 0.0, 0.7)
    grown = bl1_correct(raw, BL1Params(d_rho=0.1, d_theta=0.05))
    assert np.linalg.norm(grown) == pytest.approx(5.1)


def test_bl1_matches_direct_formula():
    rng = np.random.default_rng(1)
    for _ in range(50):
        rho, th, ph = rng.uniform(1, 20), rng.uniform(-0.3, 0.3), rng.uniform(-np.pi, np.pi)
        dr, dt, dp = rng.normal(size=3) * 0.05
        x = (rho + dr) * np.cos(dt) * np.sin(ph - dp)
        y = (rho + dr) * np.cos(dt) * np.cos(ph - dp)
        z = (rho + dr) * np.sin(dt)
        got = bl1_correct(SphericalPoint(rho, th, ph), BL1Params(dr, dt, dp))
        assert np.allclose(got, [x, y, z], atol=1e-12)


def test_bl2_examples():
    raw = SphericalPoint(4.0, 0.2, 1.1)
    assert np.allclose(bl2_correct(raw, BL2Params()), bl1_correct(raw, BL1Params()), atol=1e-12)
    base = bl2_correct(SphericalPoint(3.0, 0.0, 0.0), BL2Params())
    shifted = bl2_correct(SphericalPoint(3.0, 0.0, 0.0), BL2Params(h=0.2))
    assert shifted - base == pytest.approx([-0.2, 0.0, 0.0], abs=1e-12)


def test_bl2_formula_equals_decomposition():
    rng = np.random.default_rng(2)
    S = np.column_stack([rng.uniform(1, 30, 200), rng.uniform(-0.4, 0.4, 200), rng.uniform(-np.pi, np.pi, 200)])
    for _ in range(10):
        a = BL2Params(*rng.normal(size=3) * 0.05, 1 + rng.normal() * 0.01, *rng.normal(size=2) * 0.05)
        assert np.max(np.abs(bl2_correct(S, a) - bl2_decomposed(S, a))) < 1e-12


def planes_fixture(rng, n=3):
    normals = so3_exp(rng.normal(size=3)) @ np.eye(3)
    anchors = rng.normal(size=(n, 3)) * 2
    clouds = []
    for k in range(n):
        u, v = np.linalg.svd(normals[:, [k]])[0][:, 1:].T
        c = rng.normal(size=(20, 2))
        clouds.append(anchors[k] + c[:, :1] * u + c[:, 1:] * v)
    return clouds, normals.T, anchors


def test_p2p_examples():
    rng = np.random.default_rng(3)
    clouds, N, A = planes_fixture(rng)
    assert p2p_cost(clouds, N, A) == pytest.approx(0.0, abs=1e-12)
    assert p2p_cost(clouds, N, A + 0.1 * N) == pytest.approx(0.1 * 60)
    with pytest.raises(ValueError):
        p2p_cost(clouds, N * 1.01, A)


def test_p2p_matches_double_loop():
    rng = np.random.default_rng(4)
    clouds = [rng.normal(size=(15, 3)) for _ in range(4)]
    N = rng.normal(size=(4, 3))
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    A = rng.normal(size=(4, 3))
    S = Sim3Transform(1.02, so3_exp([0.01, 0.02, -0.01]), [0.1, 0, -0.05])
    total = 0.0
    for P, n, p0 in zip(clouds, N, A):
        for x in P:
            total += abs(n @ (S.apply(x[None])[0] - p0))
    assert p2p_cost(clouds, N, A, S) == pytest.approx(total, rel=1e-12)
    shuffled = [P[rng.permutation(len(P))] for P in clouds]
    assert p2p_cost(shuffled, N, A, S) == pytest.approx(total, rel=1e-12)


def tetrahedral_planes():
    """Faces of a regular tetrahedron, turned so no pair meets parallel to the ring plane."""
    N = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / np.sqrt(3)
    N = N @ so3_exp([0.3, 0.2, 0.1]).T
    return [TargetPlane(n, 2.0 * n) for n in N]


def test_tetrahedral_placement_full_rank():
    pm = placement_from_planes(tetrahedral_planes())
    assert pm.matrix.shape == (18, 15)
    assert pm.rank == 15


def test_placement_null_direction_is_structural():
    """Generic placements leave exactly one null direction in the raw system; the
    linearized similarity system is still full rank."""
    pm = placement_from_planes(tetrahedral_planes())
    assert pm.rank == 14 and pm.sim3_rank == 13
    rng = np.random.default_rng(5)
    for _ in range(10):
        N = rng.normal(size=(4, 3))
        N /= np.linalg.norm(N, axis=1, keepdims=True)
        pm = placement_matrix(N, intersection_points(N, rng.normal(size=(4, 3)) * 3))
        assert pm.rank == 14 and pm.sim3_rank == 13


def test_degenerate_placements_lose_rank():
    planes = tetrahedral_planes()
    sharing_axis = np.array([[1, 0, 0.2], [0, 1, 0.2], [1, 1, 0.4], [0.3, -0.2, 1.0]])
    sharing_axis /= np.linalg.norm(sharing_axis, axis=1, keepdims=True)  # first three coplanar
    coplanar = [TargetPlane(n, 3.0 * n + [0, 0, 0.1]) for n in sharing_axis]
    assert placement_from_planes(coplanar).rank < 15
    dup = placement_matrix(np.array([p.normal for p in planes[:3]] + [planes[0].normal]),
                           np.vstack([intersection_points(
                               np.array([p.normal for p in planes]), np.array([p.anchor for p in planes]))[:5],
                               np.zeros((1, 3))]))
    assert dup.rank < 15
    with pytest.raises(ValueError):
        placement_from_planes(planes[:3])


def test_placement_rank_invariant_under_rotation_about_ring_axis():
    planes = tetrahedral_planes()
    R = so3_exp([0, 0, 0.7])
    turned = [TargetPlane(R @ p.normal, R @ p.anchor) for p in planes]
    a, b = placement_from_planes(planes), placement_from_planes(turned)
    assert a.rank == b.rank and a.sim3_rank == b.sim3_rank


def test_plane_helpers():
    pose = RigidTransform3.from_euler(0, 10, 30, [4, 1, 0])
    pl = plane_from_pose(pose)
    V = pose.apply(np.array([[0, 0.5, 0.5], [0, -0.5, 0.5], [0, -0.5, -0.5], [0, 0.5, -0.5]]))
    fv = plane_from_vertices(V)
    assert abs(abs(fv.normal @ pl.normal) - 1) < 1e-12
    assert abs((fv.anchor - pl.anchor) @ pl.normal) < 1e-12


def test_bl1_recovers_injected_range_offset():
    spec = LidarSpec(elevations=FOUR_RINGS, ring_bias=np.full(4, -0.05))
    scene = intrinsic_scene(spec)
    planes = [plane_from_pose(t.pose) for t in scene.targets]
    res = calibrate_rings(scene.scans, "bl1", planes=planes)
    assert len(res.params) == 4
    for r, x in res.params.items():
        assert abs(x[0] - 0.05) < 0.005
        assert res.cost_after[r] <= res.cost_before[r]


def test_sim3_identity_on_clean_data():
    scene = intrinsic_scene(LidarSpec(elevations=FOUR_RINGS))
    planes = [plane_from_pose(t.pose) for t in scene.targets]
    with warnings.catch_warnings():
        warnings.simplefilter("error", PlacementWarning)
        res = calibrate_rings(scene.scans, "sim3", planes=planes)
    for x in res.params.values():
        T = Sim3Transform.from_vector(x)
        assert np.linalg.norm(T.translation) < 1e-3 and abs(T.scale - 1) < 1e-3
        assert np.rad2deg(np.linalg.norm(x[1:4])) < 0.1


def test_bl2_cost_never_increases():
    spec = LidarSpec(elevations=FOUR_RINGS[:2], ring_bias=np.array([0.02, -0.03]))
    scene = intrinsic_scene(spec)
    planes = [plane_from_pose(t.pose) for t in scene.targets]
    res = calibrate_rings(scene.scans, "bl2", planes=planes)
    for r in res.params:
        assert res.cost_after[r] <= res.cost_before[r]
        assert res.cost_after[r] < 0.05 * res.cost_before[r]


def test_sim3_warns_on_degenerate_placement():
    # every target upright: all normals horizontal
    spec = LidarSpec(elevations=FOUR_RINGS[1:2])
    scene = intrinsic_scene(spec)
    planes = []
    for k, t in enumerate(scene.targets):
        n = t.pose.rotation[:, 0] * [1, 1, 0]
        n /= np.linalg.norm(n)
        planes.append(TargetPlane(n, t.pose.translation))
    with pytest.warns(PlacementWarning):
        res = calibrate_rings(scene.scans, "sim3", planes=planes)
    assert res.warnings


def test_vertex_loop_runs_and_reports():
    spec = LidarSpec(elevations=FOUR_RINGS)
    scene = intrinsic_scene(spec)
    targets = [t.resolve() for t in scene.targets]
    init = [t.pose.inverse() for t in scene.targets]
    res = calibrate_rings(scene.scans, "bl1", targets=targets, init_poses=init, max_outer=3)
    assert 1 <= res.outer_iterations <= 3
    assert len(res.vertices) == 4
    for r in res.params:
        assert res.cost_after[r] <= res.cost_before[r]
    d = res.to_dict()
    assert d["model"] == "bl1" and set(map(int, d["rings"])) == set(res.params)


def test_calibrate_rings_errors():
    scene = intrinsic_scene(LidarSpec(elevations=FOUR_RINGS))
    with pytest.raises(ValueError):
        calibrate_rings(scene.scans[:1], "bl1", planes=[TargetPlane([1, 0, 0], [4, 0, 0])])
    with pytest.raises(ValueError):
        calibrate_rings(scene.scans, "bl1")
    with pytest.raises(ValueError):
        calibrate_rings(scene.scans, "bogus", planes=[plane_from_pose(t.pose) for t in scene.targets])


def test_estimator_api():
    spec = LidarSpec(elevations=FOUR_RINGS, ring_bias=np.full(4, 0.03))
    scene = intrinsic_scene(spec)
    planes = [plane_from_pose(t.pose) for t in scene.targets]
    est = RingIntrinsicCalibrator(model="bl1").fit(scene.scans, planes=planes)
    fixed = est.transform(scene.scans)
    assert p2p_cost([s.points for s in fixed], [p.normal for p in planes], [p.anchor for p in planes]) < 1e-6
    assert est.get_params()["model"] == "bl1"
