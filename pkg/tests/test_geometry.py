import numpy as np
import pytest

from cableplan import geometry as geo
from cableplan.geometry import (
    DualCertificate, GeometryError, HalfspacePolytope, RigidPose,
    contains, make_cuboid, make_prism, min_distance_dual,
    min_distance_primal, min_norm_point, transform_obstacle,
)
from conftest import random_polytope, random_pose, random_rotation

I3 = RigidPose.identity()


def triangle_vertices(side=1.0):
    r = side / np.sqrt(3.0)
    ang = np.pi / 2 + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    return np.column_stack([r * np.cos(ang), r * np.sin(ang)])


# --- construction ---------------------------------------------------------

def test_cuboid_basic():
    c = make_cuboid((1, 1, 1))
    assert c.num_faces == 6
    assert contains(c, (0.999, 0, 0))
    assert not contains(c, (1.001, 0, 0))
    assert contains(c, np.zeros(3))


def test_cuboid_quadcable_template():
    c = make_cuboid((0.075, 0.075, 0.5))
    assert contains(c, (0, 0, 0.5))
    assert not contains(c, (0, 0, 0.51))


def test_cuboid_offset_distance():
    a = make_cuboid((1, 1, 1), (3, 0, 0))
    b = make_cuboid((1, 1, 1))
    assert min_distance_primal(a, I3, b, I3).distance == pytest.approx(1.0, abs=1e-9)


def test_cuboid_rejects_nonpositive_extent():
    with pytest.raises(GeometryError):
        make_cuboid((1, 0, 1))
    with pytest.raises(GeometryError):
        make_cuboid((-1, 1, 1))


def test_prism_triangle_payload():
    p = make_prism(triangle_vertices(), 0.1)
    assert p.num_faces == 5
    assert contains(p, (0, 0, 0))
    assert not contains(p, (0.6, 0, 0))
    assert not contains(p, (0, 0, 0.06))


def test_prism_square_equals_cuboid(rng):
    sq = make_prism([(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)], 2.0)
    cu = make_cuboid((0.5, 0.5, 1.0))
    pts = rng.uniform(-1.2, 1.2, size=(200, 3))
    assert np.array_equal(contains(sq, pts), contains(cu, pts))


def test_prism_rejects_nonconvex():
    bad = [(0, 0), (2, 0), (1, 0.2), (0, 2)]   # reflex at third vertex
    with pytest.raises(GeometryError):
        make_prism(bad, 1.0)
    with pytest.raises(GeometryError):
        make_prism(triangle_vertices()[::-1], 1.0)  # clockwise


def test_empty_and_unbounded_rejected():
    A = np.vstack([np.eye(3), -np.eye(3)])
    with pytest.raises(GeometryError):
        HalfspacePolytope(A, np.array([1, 1, 1, -2, 1, 1.0]))  # empty
    with pytest.raises(GeometryError):
        HalfspacePolytope(np.array([[1.0, 0, 0], [-1, 0, 0],
                                    [0, 1, 0], [0, -1, 0]]), np.ones(4))  # slab


def test_vertices_of_cube():
    c = make_cuboid((1, 2, 3), (0.5, 0, 0))
    V = c.vertices()
    assert V.shape == (8, 3)
    assert np.allclose(sorted(V[:, 0]), [-0.5] * 4 + [1.5] * 4)


def test_rigid_pose_validation():
    with pytest.raises(GeometryError):
        RigidPose(np.eye(3) * 1.001, np.zeros(3))
    R = random_rotation(np.random.default_rng(3))
    p = RigidPose(R, np.ones(3))
    q = p.inverse()
    assert np.allclose(q.apply(p.apply(np.array([0.3, -0.2, 0.9]))),
                       [0.3, -0.2, 0.9], atol=1e-12)


# --- transforms -----------------------------------------------------------

def test_transform_identity():
    obs = make_cuboid((1, 1, 1), (2, 0, 0))
    t = transform_obstacle(obs, I3)
    assert np.allclose(t.A, obs.A)
    assert np.allclose(t.B, obs.B)


def test_transform_translation():
    obs = make_cuboid((0.5, 0.5, 0.5))
    pose = RigidPose(np.eye(3), np.array([1.0, 0, 0]))
    t = transform_obstacle(obs, pose)
    assert np.allclose(t.B, obs.B - obs.A @ pose.x)


def test_transform_containment_roundtrip(rng):
    # containment of mapped points agrees before/after the frame change
    for _ in range(5):
        obs = random_polytope(rng, rng.uniform(-1, 1, 3))
        pose = random_pose(rng)
        t = transform_obstacle(obs, pose)
        lo, hi = obs.bounding_box
        pts = rng.uniform(lo - 0.3, hi + 0.3, size=(50, 3))
        body_pts = (pts - pose.x) @ pose.R
        assert np.array_equal(contains(obs, pts), contains(t, body_pts))


def test_transform_inverse_recovers_set(rng):
    obs = random_polytope(rng, [0.5, -0.2, 0.1])
    pose = random_pose(rng)
    body = transform_obstacle(obs, pose)
    # map back with the inverse pose and compare point membership
    back = HalfspacePolytope(body.A @ pose.R.T, body.B + body.A @ pose.R.T @ pose.x)
    lo, hi = obs.bounding_box
    pts = np.random.default_rng(7).uniform(lo - 0.2, hi + 0.2, size=(100, 3))
    assert np.array_equal(contains(obs, pts), contains(back, pts))


# --- primal distance ------------------------------------------------------

def test_unit_cube_face_separation():
    a = make_cuboid((0.5, 0.5, 0.5))
    b = make_cuboid((0.5, 0.5, 0.5), (4, 0, 0))
    w = min_distance_primal(a, I3, b, I3)
    assert w.distance == pytest.approx(3.0, abs=1e-10)
    assert w.y_a[0] == pytest.approx(0.5, abs=1e-9)
    assert w.y_b[0] == pytest.approx(3.5, abs=1e-9)


def test_overlapping_cubes_distance_zero():
    a = make_cuboid((0.5, 0.5, 0.5))
    b = make_cuboid((0.5, 0.5, 0.5), (0.5, 0, 0))
    w = min_distance_primal(a, I3, b, I3)
    assert w.distance == 0.0
    assert np.allclose(w.y_a, w.y_b)
    assert contains(a, w.y_a, tol=1e-7) and contains(b, w.y_b, tol=1e-7)


def test_witnesses_inside_both_sets(rng):
    for _ in range(20):
        a = random_polytope(rng, rng.uniform(-1, 1, 3))
        b = random_polytope(rng, rng.uniform(1.5, 3.5, 3))
        pa, pb = random_pose(rng), random_pose(rng)
        w = min_distance_primal(a, pa, b, pb)
        a_world = transform_obstacle(a, pa.inverse()) if a.frame_id else None
        # verify via the halfspace systems in world frame
        assert np.all(a.A @ (pa.R.T @ (w.y_a - pa.x)) <= a.B + 1e-7)
        assert np.all(b.A @ (pb.R.T @ (w.y_b - pb.x)) <= b.B + 1e-7)
        assert w.distance == pytest.approx(np.linalg.norm(w.y_a - w.y_b), abs=1e-7)


def test_distance_matches_feature_oracle(rng):
    # exhaustive feature-pair enumeration: vertex/face projections plus all
    # edge/edge segment distances (exact for disjoint convex polytopes)
    prism = make_prism(triangle_vertices(), 0.1)
    for trial in range(8):
        tet_pts = rng.normal(size=(4, 3)) * 0.4 + np.array([1.8, 0.3, 0.2])
        from scipy.spatial import ConvexHull
        hull = ConvexHull(tet_pts)
        tet = HalfspacePolytope(hull.equations[:, :3], -hull.equations[:, 3])
        w = min_distance_primal(prism, I3, tet, I3)
        oracle = _feature_pair_distance(prism, tet)
        assert w.distance == pytest.approx(oracle, abs=1e-5)


def _edges_of(poly):
    from scipy.spatial import ConvexHull
    V = poly.vertices()
    hull = ConvexHull(V)
    edges = set()
    for simplex in hull.simplices:
        for i in range(3):
            a, b = simplex[i], simplex[(i + 1) % 3]
            edges.add((min(a, b), max(a, b)))
    return V, [(V[i], V[j]) for i, j in edges]


def _segment_distance(p1, q1, p2, q2):
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    c, b = d1 @ r, d1 @ d2
    denom = a * e - b * b
    s = np.clip((b * f - c * e) / denom, 0, 1) if denom > 1e-14 else 0.0
    t = (b * s + f) / e if e > 1e-14 else 0.0
    if t < 0:
        t = 0.0
        s = np.clip(-c / a, 0, 1) if a > 1e-14 else 0.0
    elif t > 1:
        t = 1.0
        s = np.clip((b - c) / a, 0, 1) if a > 1e-14 else 0.0
    return float(np.linalg.norm((p1 + s * d1) - (p2 + t * d2)))


def _vertex_face_candidates(V, other):
    best = np.inf
    A, B = other.A, other.B
    norms = np.linalg.norm(A, axis=1)
    for v in V:
        for i in range(A.shape[0]):
            gap = (A[i] @ v - B[i]) / norms[i]
            proj = v - gap * A[i] / norms[i]
            if gap >= 0 and contains(other, proj, tol=1e-9):
                best = min(best, gap)
    return best


def _feature_pair_distance(pa, pb):
    Va, Ea = _edges_of(pa)
    Vb, Eb = _edges_of(pb)
    best = min(_vertex_face_candidates(Va, pb), _vertex_face_candidates(Vb, pa))
    for va in Va:
        best = min(best, float(np.min(np.linalg.norm(Vb - va, axis=1))))
    for p1, q1 in Ea:
        for p2, q2 in Eb:
            best = min(best, _segment_distance(p1, q1, p2, q2))
    return best


def test_symmetry(rng):
    a = random_polytope(rng, [0, 0, 0])
    b = random_polytope(rng, [2.5, 0.5, -0.3])
    d1 = min_distance_primal(a, I3, b, I3).distance
    d2 = min_distance_primal(b, I3, a, I3).distance
    assert d1 == pytest.approx(d2, abs=1e-12)


def test_translation_equivariance(rng):
    a = random_polytope(rng, [0, 0, 0])
    b = random_polytope(rng, [2.5, 0, 0])
    t = np.array([0.7, -1.1, 0.4])
    pa = RigidPose(np.eye(3), t)
    pb = RigidPose(np.eye(3), t)
    d0 = min_distance_primal(a, I3, b, I3).distance
    d1 = min_distance_primal(a, pa, b, pb).distance
    assert d0 == pytest.approx(d1, abs=1e-9)


def test_min_norm_point_simplex():
    pts = np.array([[1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [2.0, 0.0, 0.0]])
    x, w = min_norm_point(pts)
    assert np.allclose(x, [1, 0, 0], atol=1e-10)
    assert w.sum() == pytest.approx(1.0)
    assert np.all(w >= 0)


# --- dual distance --------------------------------------------------------

def test_dual_matches_primal_cubes():
    a = make_cuboid((0.5, 0.5, 0.5))
    b = make_cuboid((0.5, 0.5, 0.5), (4, 0, 0))
    cert = min_distance_dual(a, I3, b)
    assert cert.value == pytest.approx(3.0, abs=1e-8)
    # support only on the two facing faces (+x of body, -x of obstacle)
    assert cert.lambda_body[0] > 0.9
    assert cert.lambda_obs[3] > 0.9
    assert np.abs(np.delete(cert.lambda_body, 0)).max() < 1e-9
    assert np.abs(np.delete(cert.lambda_obs, 3)).max() < 1e-9


def test_dual_intersecting_flagged_unsafe():
    a = make_cuboid((0.5, 0.5, 0.5))
    b = make_cuboid((1, 1, 1), (0.5, 0, 0))
    cert = min_distance_dual(a, I3, b)
    assert cert.value <= 0.0
    assert not cert.separated


def test_dual_certificate_invariants(rng):
    for _ in range(30):
        body = random_polytope(rng, [0, 0, 0])
        obs = random_polytope(rng, rng.uniform(1.8, 3.0, 3))
        pose = random_pose(rng, span=0.3)
        cert = min_distance_dual(body, pose, obs)
        obs_b = transform_obstacle(obs, pose)
        stat, norm_excess, val_err = cert.residuals(body.A, body.B, obs_b.A, obs_b.B)
        assert stat <= 1e-7
        assert norm_excess <= 1e-9
        assert val_err <= 1e-7
        assert np.all(cert.lambda_body >= 0)
        assert np.all(cert.lambda_obs >= 0)


def test_strong_duality_random_pairs(rng):
    for _ in range(100):
        body = random_polytope(rng, [0, 0, 0])
        obs = random_polytope(rng, rng.uniform(1.6, 3.2, 3))
        pose = random_pose(rng, span=0.2)
        w = min_distance_primal(body, pose, obs, I3)
        if w.distance <= 1e-6:
            continue
        cert = min_distance_dual(body, pose, obs)
        assert abs(cert.value - w.distance) <= 1e-6 * (1 + w.distance)


def test_weak_duality_feasible_points(rng):
    # any feasible dual point under-estimates the primal distance
    body = random_polytope(rng, [0, 0, 0])
    obs = random_polytope(rng, [2.5, 0.4, -0.2])
    d = min_distance_primal(body, I3, obs, I3).distance
    from cableplan.geometry import _support_multipliers
    for _ in range(50):
        u = rng.normal(size=3)
        u = u / np.linalg.norm(u)
        t = rng.uniform(0.05, 1.0)
        lam_o, cost_o = _support_multipliers(obs.A, obs.B, t * u)
        lam_b, cost_b = _support_multipliers(body.A, body.B, -t * u)
        value = -(cost_o + cost_b)
        assert value <= d + 1e-7


def test_inflate_offsets_faces():
    c = make_cuboid((0.5, 0.5, 0.5))
    infl = c.inflate(0.075)
    assert np.allclose(infl.B, c.B + 0.075)
    assert contains(infl, (0.57, 0, 0))
    assert not contains(infl, (0.58, 0, 0))
