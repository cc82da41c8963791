import numpy as np
import pytest

from cableplan import cbf, dynamics as dyn
from cableplan.cbf import (
    CbfError, SafetyConfig, active_obstacles, barrier_value, body_ids,
    body_polytope, body_pose, decay_rhs, emit_constraints,
)
from cableplan.geometry import (
    RigidPose, make_cuboid, min_distance_dual, min_distance_primal,
)

QI = np.array([1.0, 0, 0, 0])
I3 = RigidPose.identity()


def test_safety_config_validation():
    with pytest.raises(CbfError):
        SafetyConfig(gamma=1.0)
    with pytest.raises(CbfError):
        SafetyConfig(gamma=-0.1)
    with pytest.raises(CbfError):
        SafetyConfig(d_safe=1.0, activation_radius=0.5)
    cfg = SafetyConfig(gamma=(0.9, 0.8))
    assert cfg.gamma_at(0) == 0.9
    assert cfg.gamma_at(5) == 0.8   # constant past the end of the list


def test_barrier_known_offset(triangle_params):
    st = dyn.hover_state(np.zeros(3), QI, triangle_params)
    # face-to-face: payload vertex at x=0.5, obstacle face at x=3.5
    obs = make_cuboid((0.5, 2.0, 2.0), (4.0, 0, 0))
    cfg = SafetyConfig(d_safe=0.1)
    h = barrier_value(st, "payload", obs, triangle_params, cfg)
    assert h == pytest.approx(3.0 - 0.1, abs=1e-9)


def test_barrier_contact_negative(triangle_params):
    st = dyn.hover_state(np.zeros(3), QI, triangle_params)
    obs = make_cuboid((0.5, 2.0, 2.0), (1.0, 0, 0))   # touching x=0.5
    cfg = SafetyConfig(d_safe=0.1)
    h = barrier_value(st, "payload", obs, triangle_params, cfg)
    assert h == pytest.approx(-0.1, abs=1e-9)


def test_barrier_matches_primal_oracle(triangle_params, rng):
    cfg = SafetyConfig(d_safe=0.07)
    for _ in range(10):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        st = dyn.SystemState(rng.normal(size=3), q, np.zeros(3), np.zeros(3),
                             triangle_params.hover_force + rng.normal(size=3) * 0.3,
                             rng.normal(size=3) * 0.03)
        obs = make_cuboid(rng.uniform(0.2, 0.6, 3), rng.uniform(2, 4, 3))
        for b in body_ids(triangle_params):
            h = barrier_value(st, b, obs, triangle_params, cfg)
            d = min_distance_primal(body_polytope(triangle_params, b),
                                    body_pose(st, triangle_params, b),
                                    obs, I3).distance
            assert h + cfg.d_safe == pytest.approx(d, abs=1e-6)


def test_decay_rhs_values():
    cfg = SafetyConfig(gamma=0.5, activation_radius=1.0)
    assert decay_rhs(1.0, cfg, 2, 1.0) == pytest.approx(0.125)
    assert decay_rhs(1.0, cfg, 2, 0.0) == 0.0
    cfg2 = SafetyConfig(gamma=(0.9, 0.8), activation_radius=1.0)
    assert decay_rhs(2.0, cfg2, 1, 0.5) == pytest.approx(0.72)


def test_active_obstacles_gating(triangle_params):
    st = dyn.hover_state(np.zeros(3), QI, triangle_params)
    cfg = SafetyConfig(activation_radius=0.6)
    assert active_obstacles(st, triangle_params, [], cfg) == []
    far = make_cuboid((0.5, 0.5, 0.5), (10, 0, 0))
    assert active_obstacles(st, triangle_params, [far], cfg) == []
    # near a quad-cable body only (above the payload plane)
    near_qc = make_cuboid((0.2, 0.2, 0.2), (0.0, 0.9, 1.4))
    acts = active_obstacles(st, triangle_params, [far, near_qc], cfg)
    assert acts == [1]
    d_payload = min_distance_primal(triangle_params.payload_polytope,
                                    st.pose(), near_qc, I3).distance
    assert d_payload > cfg.activation_radius  # payload alone would not trigger


def test_emit_constraints_static_feasibility(triangle_params):
    st = dyn.hover_state(np.zeros(3), QI, triangle_params)
    cfg = SafetyConfig(d_safe=0.05, gamma=0.4)
    obs = make_cuboid((0.3, 0.3, 0.3), (1.5, 0.2, 0.1))
    for body in body_ids(triangle_params):
        h0 = barrier_value(st, body, obs, triangle_params, cfg)
        cert = min_distance_dual(body_polytope(triangle_params, body),
                                 body_pose(st, triangle_params, body), obs)
        for knot in (0, 3, 7):
            blk = emit_constraints(knot, body, obs, h0, cfg, triangle_params)
            lam = np.concatenate([cert.lambda_obs, cert.lambda_body])
            pose = body_pose(st, triangle_params, body)
            margin, stat, norm = blk.evaluate_rows(pose.R, pose.x, lam, 1.0)
            assert margin <= 1e-9            # row (a) satisfied
            assert np.abs(stat).max() <= 1e-7
            assert norm <= 1e-9


def test_emit_constraints_no_positive_margin_when_intersecting(triangle_params, rng):
    # weak duality: any feasible multipliers certify at most the (zero)
    # separation, so the margin row cannot exceed d_safe for intersecting sets
    st = dyn.hover_state(np.zeros(3), QI, triangle_params)
    cfg = SafetyConfig(d_safe=0.05, gamma=0.4)
    obs = make_cuboid((0.4, 0.4, 0.4), (0.3, 0.0, 0.0))  # overlaps payload
    blk = emit_constraints(0, "payload", obs, 0.5, cfg, triangle_params)
    pose = body_pose(st, triangle_params, "payload")
    from cableplan.geometry import _support_multipliers, transform_obstacle
    obs_b = transform_obstacle(obs, pose)
    for _ in range(50):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        t = rng.uniform(0.1, 1.0)
        lam_o, _ = _support_multipliers(obs_b.A, obs_b.B, t * u)
        lam_b, _ = _support_multipliers(blk.A_body, blk.B_body, -t * u)
        lam = np.concatenate([lam_o, lam_b])
        margin, stat, norm = blk.evaluate_rows(pose.R, pose.x, lam, 1.0)
        assert np.abs(stat).max() <= 1e-7 and norm <= 1e-9
        # rows feasible in (b)-(d); margin row must then be violated:
        # rhs(alpha=1) = gamma^1 * 0.5 * ... + d_safe > 0 >= certified value
        assert margin > 0.0


def test_zero_h0_reduces_to_safe_separation(triangle_params):
    st = dyn.hover_state(np.zeros(3), QI, triangle_params)
    cfg = SafetyConfig(d_safe=0.05, gamma=0.4)
    obs = make_cuboid((0.3, 0.3, 0.3), (2.0, 0, 0))
    blk = emit_constraints(2, "payload", obs, 0.0, cfg, triangle_params)
    cert = min_distance_dual(triangle_params.payload_polytope, st.pose(), obs)
    lam = np.concatenate([cert.lambda_obs, cert.lambda_body])
    pose = st.pose()
    margin, _, _ = blk.evaluate_rows(pose.R, pose.x, lam, 1.0)
    # margin row reads d_safe - certified distance <= 0 (still requires the
    # certified separation to exceed d_safe)
    assert margin == pytest.approx(cfg.d_safe - cert.value, abs=1e-8)


def test_weak_duality_certificate_soundness(triangle_params, rng):
    # random feasible dual assignments never certify more than the distance
    st = dyn.hover_state(np.zeros(3), QI, triangle_params)
    cfg = SafetyConfig(d_safe=0.0, gamma=0.4)
    obs = make_cuboid((0.4, 0.4, 0.4), (2.2, 0.3, 0.2))
    pose = body_pose(st, triangle_params, "payload")
    d_true = min_distance_primal(triangle_params.payload_polytope, pose, obs, I3).distance
    from cableplan.geometry import _support_multipliers, transform_obstacle
    obs_b = transform_obstacle(obs, pose)
    A_body = triangle_params.payload_polytope.A
    B_body = triangle_params.payload_polytope.B
    for _ in range(100):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        t = rng.uniform(0.05, 1.0)
        lam_o, cost_o = _support_multipliers(obs_b.A, obs_b.B, t * u)
        lam_b, cost_b = _support_multipliers(A_body, B_body, -t * u)
        certified = -(cost_o + cost_b)
        assert certified <= d_true + 1e-7


def test_monotone_floor_positive(triangle_params):
    cfg = SafetyConfig(gamma=0.7, d_safe=0.0)
    h0 = 0.8
    floors = [decay_rhs(h0, cfg, i, 1.0) for i in range(10)]
    assert all(f > 0 for f in floors)
    assert all(floors[i + 1] < floors[i] for i in range(9))
    assert floors[3] == pytest.approx(h0 * 0.7 ** 4)


def test_unknown_body_id(triangle_params):
    st = dyn.hover_state(np.zeros(3), QI, triangle_params)
    with pytest.raises(CbfError):
        body_pose(st, triangle_params, "wing")
