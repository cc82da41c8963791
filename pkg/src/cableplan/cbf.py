"""Discrete exponential control-barrier constraints over dual distance
certificates.

For each (horizon knot, body, active obstacle) triple the planner receives
a constraint block whose rows bound the body/obstacle separation from
below by a geometrically decaying fraction of the initial barrier value:

    -lam_obs (B_obs - A_obs x_body) - lam_body B_body >= alpha_i (prod gamma_j) h0 + d_safe
    (A_obs R_body)^T lam_obs + A_body^T lam_body = 0
    lam >= 0,  ||A_obs^T lam_obs||^2 <= 1,  0 <= alpha_i <= 1

By weak duality any multipliers satisfying the equality/cone rows certify
that the left side lower-bounds the true polytope distance, so a feasible
block guarantees separation without solving a distance problem inside the
NLP. The barrier is linear in distance (h = dist - d_safe), which is the
form the dual program certifies.
"""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from .geometry import HalfspacePolytope, RigidPose, min_distance_primal
from .rotations import rotmat

LAMBDA_MAX = 1e3


class CbfError(ValueError):
    pass


@dataclass(frozen=True)
class SafetyConfig:
    d_safe: float = 0.0
    gamma: tuple | float = 0.4
    activation_radius: float = 0.6
    obstacle_inflation: float = 0.075

    def __post_init__(self):
        g = self.gamma
        gams = np.atleast_1d(np.asarray(g, dtype=float))
        if np.any(gams < 0.0) or np.any(gams >= 1.0):
            raise CbfError(f"decay rates must satisfy 0 <= gamma < 1, got {gams}")
        if self.d_safe < 0.0:
            raise CbfError("d_safe must be nonnegative")
        if self.activation_radius <= self.d_safe:
            raise CbfError("activation radius must exceed d_safe")
        object.__setattr__(self, "gamma", tuple(gams))

    def gamma_at(self, i):
        g = self.gamma
        return g[min(i, len(g) - 1)]

    def gamma_product(self, i):
        """prod_{j=0..i} gamma_j (constant gamma repeats past the list end)."""
        return float(np.prod([self.gamma_at(j) for j in range(i + 1)]))


def body_ids(params):
    return ["payload"] + [f"qc{k}" for k in range(params.num_robots)]


def body_polytope(params, body_id):
    if body_id == "payload":
        return params.payload_polytope
    if body_id.startswith("qc"):
        return params.quadcable_polytope
    raise CbfError(f"unknown body id {body_id!r}")


def body_pose(state, params, body_id):
    if body_id == "payload":
        return state.pose()
    if body_id.startswith("qc"):
        return dyn.quadcable_pose(state, params, int(body_id[2:]))
    raise CbfError(f"unknown body id {body_id!r}")


def body_pose_vector(z, params, body_id):
    """(R, x) of a body from the raw state vector; autodiff-safe."""
    if body_id == "payload":
        return rotmat(z[dyn.IDX_QUAT]), z[dyn.IDX_POS]
    if body_id.startswith("qc"):
        return dyn.quadcable_pose_vector(z, params, int(body_id[2:]))
    raise CbfError(f"unknown body id {body_id!r}")


def barrier_value(state, body_id, obstacle, params, config):
    """h = dist(body at its state-derived pose, obstacle) - d_safe."""
    poly = body_polytope(params, body_id)
    pose = body_pose(state, params, body_id)
    pair = min_distance_primal(poly, pose, obstacle, RigidPose.identity())
    return pair.distance - config.d_safe


def decay_rhs(h0, config, i, alpha_i):
    """Exponential barrier floor alpha_i * (prod_{j<=i} gamma_j) * h0."""
    return alpha_i * config.gamma_product(i) * h0


def active_obstacles(state, params, obstacles, config):
    """Indices of obstacles within the activation radius of any body."""
    poses = [(body_polytope(params, b), body_pose(state, params, b))
             for b in body_ids(params)]
    out = []
    for idx, obs in enumerate(obstacles):
        for poly, pose in poses:
            d = min_distance_primal(poly, pose, obs, RigidPose.identity()).distance
            if d < config.activation_radius:
                out.append(idx)
                break
    return out


@dataclass
class ConstraintBlock:
    """Stronger-CBF rows for one (knot, body, obstacle) triple.

    The rows are expressions over the body pose at knot i+1 and this
    block's dual variables; the planner binds them to slices of its
    decision vector. Row evaluators accept numpy arrays or autodiff Jets.
    """
    body_id: str
    obstacle_id: int
    knot: int
    A_obs: np.ndarray
    B_obs: np.ndarray
    A_body: np.ndarray
    B_body: np.ndarray
    h0: float
    gamma_prod: float
    d_safe: float
    # decision-variable binding (set by the planner)
    dual_slice: slice | None = None
    alpha_index: int | None = None

    @property
    def num_obs_faces(self):
        return self.A_obs.shape[0]

    @property
    def num_body_faces(self):
        return self.A_body.shape[0]

    @property
    def num_duals(self):
        return self.num_obs_faces + self.num_body_faces

    def split(self, lam):
        return lam[:self.num_obs_faces], lam[self.num_obs_faces:]

    def margin_row(self, x_body, lam_obs, lam_body, alpha):
        """rhs - lhs in <= 0 form; feasibility certifies the decayed floor."""
        b_obs_body = self.B_obs - ad.matvec(self.A_obs, x_body)
        lhs = -ad.dot(lam_obs, b_obs_body) - ad.dot(lam_body, self.B_body)
        rhs = alpha * (self.gamma_prod * self.h0) + self.d_safe
        return rhs - lhs

    def stationarity_rows(self, R_body, lam_obs, lam_body):
        """(A_obs R)^T lam_obs + A_body^T lam_body = 0 (3 rows)."""
        A_obs_body = ad.matmat(self.A_obs, R_body)
        return (ad.matvec(ad.transpose(A_obs_body), lam_obs)
                + ad.matvec(self.A_body.T, lam_body))

    def norm_row(self, lam_obs):
        """||A_obs^T lam_obs||^2 - 1 <= 0 (frame-independent)."""
        s = ad.matvec(self.A_obs.T, lam_obs)
        return ad.dot(s, s) - 1.0

    def evaluate_rows(self, R_body, x_body, lam, alpha):
        """All rows numerically: (margin<=0, stationarity(3), norm<=0)."""
        lam_obs, lam_body = self.split(np.asarray(lam, dtype=float))
        margin = float(ad.value(self.margin_row(x_body, lam_obs, lam_body, alpha)))
        stat = np.asarray(ad.value(self.stationarity_rows(R_body, lam_obs, lam_body)))
        norm = float(ad.value(self.norm_row(lam_obs)))
        return margin, stat, norm


def _any_jet(*items):
    return any(isinstance(it, ad.Jet) for it in items)


def emit_constraints(knot, body_id, obstacle, h0, config, params, obstacle_id=0):
    """Build the stronger-CBF block for one knot/body/obstacle triple.

    ``h0`` is the barrier value at the current initial condition; the
    caller recomputes it every receding-horizon iteration.
    """
    body = body_polytope(params, body_id)
    return ConstraintBlock(
        body_id=body_id,
        obstacle_id=obstacle_id,
        knot=knot,
        A_obs=obstacle.A,
        B_obs=obstacle.B,
        A_body=body.A,
        B_body=body.B,
        h0=float(h0),
        gamma_prod=config.gamma_product(knot),
        d_safe=config.d_safe,
    )
