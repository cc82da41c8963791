"""Receding-horizon trajectory planner.

Builds the direct-transcription NLP over payload states, wrench-rate
inputs, barrier relaxations, and dual certificate variables for every
(knot, body, active obstacle) triple; solves it with the SQP engine; and
iterates the receding-horizon loop (apply the first input, shift the warm
start, recompute barrier values and the active obstacle set) until the
goal tolerance or an iteration/stall limit is reached.
"""
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import cbf
from . import dynamics as dyn
from . import global_planner as gp
from . import nlp
from .geometry import RigidPose, min_distance_primal
from .rotations import hamilton, conjugate, quat_angle, rotmat

NX = dyn.NX
NU = dyn.NU
ERR_DIM = 18     # [pos, orn, vel, angvel, force, moment] errors


class PlannerError(RuntimeError):
    pass


class StartInCollisionError(PlannerError):
    def __init__(self, body_id, obstacle_id, barrier):
        super().__init__(
            f"start state in collision: body {body_id!r} vs obstacle "
            f"{obstacle_id} (barrier {barrier:.4f} < 0)")
        self.body_id = body_id
        self.obstacle_id = obstacle_id


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    quaternion: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, float).ravel())
        q = np.asarray(self.quaternion, float).ravel()
        object.__setattr__(self, "quaternion", q / np.linalg.norm(q))


@dataclass
class PlanConfig:
    horizon: int = 25
    dt: float = 0.2
    q_state: np.ndarray = None          # (18,) running weights
    q_input: np.ndarray = None          # (6,)
    q_terminal: np.ndarray = None       # (18,)
    alpha_penalty_weight: float = 100.0
    max_force_offset: float = 15.0      # F within hover force +- this, per axis
    max_moment: float = 2.0
    max_force_rate: float = 30.0
    max_moment_rate: float = 4.0
    max_velocity: float = 2.0
    max_angular_velocity: float = 2.0
    t_min: float = 1e-3
    # nonzero d_safe keeps the barrier rows non-vacuous at alpha = 0 (they
    # then certify dist >= d_safe for any alpha in [0, 1])
    safety: cbf.SafetyConfig = field(
        default_factory=lambda: cbf.SafetyConfig(d_safe=0.04))
    goal_pos_tolerance: float = 0.15
    goal_orn_tolerance: float = 0.30
    max_receding_iters: int = 200
    stall_iters: int = 20
    sqp_max_iter: int = 40
    sqp_tol: float = 1e-7           # primal feasibility (drives the defect bound)
    sqp_opt_tol: float = 1e-3       # stationarity/complementarity
    qp_max_iter: int = 600
    grid_resolution: float = 0.2
    lambda_max: float = cbf.LAMBDA_MAX

    def __post_init__(self):
        if self.horizon < 2:
            raise PlannerError("horizon must be at least 2 steps")
        if self.dt <= 0.0:
            raise PlannerError("dt must be positive")
        if self.q_state is None:
            self.q_state = default_state_weights()
        if self.q_input is None:
            self.q_input = np.array([0.0025, 0.0025, 0.0025, 0.0125, 0.0125, 0.0125])
        if self.q_terminal is None:
            self.q_terminal = 10.0 * np.asarray(self.q_state, float)
        self.q_state = np.asarray(self.q_state, dtype=float)
        self.q_input = np.asarray(self.q_input, dtype=float)
        self.q_terminal = np.asarray(self.q_terminal, dtype=float)
        if (self.q_state.shape != (ERR_DIM,) or self.q_terminal.shape != (ERR_DIM,)
                or self.q_input.shape != (NU,)):
            raise PlannerError("weight vectors must have shapes (18,), (6,), (18,)")
        if np.any(self.q_state < 0) or np.any(self.q_input < 0) or np.any(self.q_terminal < 0):
            raise PlannerError("weights must be nonnegative")
        if np.any(self.q_terminal < self.q_state):
            raise PlannerError("terminal weights must dominate running weights")

    @staticmethod
    def from_dict(doc):
        cfg = dict(doc)
        kw = {}
        rename = {"N": "horizon", "Q_X": "q_state", "Q_U": "q_input",
                  "Q_XN": "q_terminal", "T_min": "t_min"}
        simple = {"dt", "alpha_penalty_weight", "max_receding_iters", "stall_iters",
                  "max_force_offset", "max_moment", "max_force_rate", "max_moment_rate",
                  "max_velocity", "max_angular_velocity", "sqp_max_iter", "sqp_tol",
                  "grid_resolution", "lambda_max"}
        for key, val in cfg.items():
            if key in rename:
                kw[rename[key]] = np.asarray(val, float) if key.startswith("Q_") else val
            elif key in simple:
                kw[key] = val
            elif key == "safety":
                kw["safety"] = cbf.SafetyConfig(**val)
            elif key == "goal_tolerance":
                kw["goal_pos_tolerance"] = val["position"]
                kw["goal_orn_tolerance"] = val["orientation"]
            else:
                raise PlannerError(f"unknown config key {key!r}")
        return PlanConfig(**kw)


def default_state_weights():
    return np.concatenate([
        np.full(3, 1.0),      # position
        np.full(3, 0.5),      # orientation
        np.full(3, 0.06),     # velocity
        np.full(3, 0.06),     # angular velocity
        np.full(3, 0.0025),   # cable force
        np.full(3, 0.0125),   # cable moment
    ])


@dataclass
class Reference:
    positions: np.ndarray        # (N+1, 3)
    quaternions: np.ndarray      # (N+1, 4) unit, scalar-first
    source: str = "goal-only"

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, float))
        q = np.atleast_2d(np.asarray(self.quaternions, float))
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise PlannerError("reference quaternions must be unit norm")
        self.quaternions = q / norms

    @staticmethod
    def hold(pose, n_knots, source="goal-only"):
        return Reference(
            positions=np.repeat(pose.position[None, :], n_knots, axis=0),
            quaternions=np.repeat(pose.quaternion[None, :], n_knots, axis=0),
            source=source)


def pose_error(state, ref_position, ref_quaternion, params):
    """18-dim error [pos, orn, vel, angvel, force, moment].

    The orientation error is twice the vector part of q_ref^-1 (x) q on the
    hemisphere nearest identity, a smooth small-angle axis error that is
    invariant to the quaternion double cover. Force error is measured from
    the hover wrench, moment from zero.
    """
    if isinstance(state, dyn.SystemState):
        z = state.as_vector()
    else:
        z = state
    return np.asarray(ad.value(pose_error_vector(
        z, np.asarray(ref_position, float), np.asarray(ref_quaternion, float), params)))


def pose_error_vector(z, ref_pos, ref_quat, params):
    """Autodiff-safe pose error over the raw state vector."""
    q = z[dyn.IDX_QUAT]
    q_err = hamilton(conjugate(ref_quat), q)
    sign = 1.0 if float(ad.value(q_err[0])) >= 0.0 else -1.0
    e_orn = ad.concat([q_err[1], q_err[2], q_err[3]]) * (2.0 * sign)
    return ad.concat([
        z[dyn.IDX_POS] - ref_pos,
        e_orn,
        z[dyn.IDX_VEL],
        z[dyn.IDX_OMEGA],
        z[dyn.IDX_FORCE] - params.hover_force,
        z[dyn.IDX_MOMENT],
    ])


# --------------------------------------------------------------------------
# horizon transcription
# --------------------------------------------------------------------------

class HorizonLayout:
    """Index bookkeeping for the stacked decision vector
    [states 0..N | inputs 0..N-1 | alphas | duals per block]."""

    def __init__(self, n_horizon, blocks):
        self.N = n_horizon
        self.blocks = blocks
        self.base_inputs = NX * (n_horizon + 1)
        self.base_alpha = self.base_inputs + NU * n_horizon
        self.n_alphas = n_horizon if blocks else 0
        base = self.base_alpha + self.n_alphas
        for blk in blocks:
            blk.dual_slice = slice(base, base + blk.num_duals)
            blk.alpha_index = self.base_alpha + blk.knot
            base += blk.num_duals
        self.dim = base

    def state_slice(self, i):
        return slice(NX * i, NX * (i + 1))

    def input_slice(self, i):
        return slice(self.base_inputs + NU * i, self.base_inputs + NU * (i + 1))

    def decode(self, z):
        states = [dyn.SystemState.from_vector(_renorm(z[self.state_slice(i)]))
                  for i in range(self.N + 1)]
        inputs = [dyn.SystemInput.from_vector(z[self.input_slice(i)])
                  for i in range(self.N)]
        alphas = z[self.base_alpha:self.base_alpha + self.n_alphas].copy()
        duals = {(b.knot, b.body_id, b.obstacle_id): z[b.dual_slice].copy()
                 for b in self.blocks}
        return states, inputs, alphas, duals


def _renorm(zs):
    z = np.asarray(zs, float).copy()
    q = z[dyn.IDX_QUAT]
    z[dyn.IDX_QUAT] = q / np.linalg.norm(q)
    return z


class HorizonProblem:
    """Direct transcription of one receding-horizon subproblem."""

    def __init__(self, x0, reference, obstacles, active_ids, config, params):
        self.x0 = x0
        self.reference = reference
        self.config = config
        self.params = params
        self.obstacles = obstacles
        self.active_ids = list(active_ids)
        N = config.horizon
        self.bodies = cbf.body_ids(params)

        # barrier at the current initial condition per (body, obstacle);
        # a negative barrier inside the d_safe margin is recoverable (the
        # decayed floor then pushes the system back out), but an actual
        # polytope intersection rejects the start
        self.h0 = {}
        blocks = []
        for oi in self.active_ids:
            obs = obstacles[oi]
            for body in self.bodies:
                h0 = cbf.barrier_value(x0, body, obs, params, config.safety)
                if h0 <= -config.safety.d_safe:
                    raise StartInCollisionError(body, oi, h0)
                self.h0[(body, oi)] = h0
                for i in range(N):
                    blk = cbf.emit_constraints(i, body, obs, h0, config.safety,
                                               params, obstacle_id=oi)
                    blocks.append(blk)
        self.layout = HorizonLayout(N, blocks)
        self._pose_cache = {}
        self._blocks_by_knot = {}
        for blk in self.layout.blocks:
            self._blocks_by_knot.setdefault(blk.knot, []).append(blk)
        self._bodies_needed = sorted({b.body_id for b in blocks})
        self._setup_counts()
        self._weights = self._build_weights()

    # ---------------- counting and bounds ----------------

    def _setup_counts(self):
        N = self.config.horizon
        n_rob = self.params.num_robots
        self.n_eq_dyn = NX * N
        self.n_eq_stat = 3 * len(self.layout.blocks)
        self.n_eq = self.n_eq_dyn + self.n_eq_stat
        self.n_in_tension = n_rob * N           # knots 1..N
        self.n_in_blocks = 2 * len(self.layout.blocks)  # margin + norm rows
        self.n_in = self.n_in_tension + self.n_in_blocks

    def bounds(self, world_bounds=None):
        n = self.layout.dim
        lb = np.full(n, -np.inf)
        ub = np.full(n, np.inf)
        cfg = self.config
        hover = self.params.hover_force
        for i in range(cfg.horizon + 1):
            s = self.layout.state_slice(i).start
            if world_bounds is not None:
                lb[s:s + 3] = world_bounds[0]
                ub[s:s + 3] = world_bounds[1]
            lb[s + 3:s + 7] = -1.2
            ub[s + 3:s + 7] = 1.2
            lb[s + 7:s + 10] = -cfg.max_velocity
            ub[s + 7:s + 10] = cfg.max_velocity
            lb[s + 10:s + 13] = -cfg.max_angular_velocity
            ub[s + 10:s + 13] = cfg.max_angular_velocity
            lb[s + 13:s + 16] = hover - cfg.max_force_offset
            ub[s + 13:s + 16] = hover + cfg.max_force_offset
            lb[s + 16:s + 19] = -cfg.max_moment
            ub[s + 16:s + 19] = cfg.max_moment
        for i in range(cfg.horizon):
            u = self.layout.input_slice(i)
            lb[u.start:u.start + 3] = -cfg.max_force_rate
            ub[u.start:u.start + 3] = cfg.max_force_rate
            lb[u.start + 3:u.stop] = -cfg.max_moment_rate
            ub[u.start + 3:u.stop] = cfg.max_moment_rate
        a0 = self.layout.base_alpha
        lb[a0:a0 + self.layout.n_alphas] = 0.0
        ub[a0:a0 + self.layout.n_alphas] = 1.0
        for blk in self.layout.blocks:
            lb[blk.dual_slice] = 0.0
            ub[blk.dual_slice] = cfg.lambda_max
        # pin the initial state
        z0 = self.x0.as_vector()
        s0 = self.layout.state_slice(0)
        lb[s0] = z0
        ub[s0] = z0
        return lb, ub

    def _build_weights(self):
        cfg = self.config
        N = cfg.horizon
        w = [np.tile(cfg.q_state, N), cfg.q_terminal, np.tile(cfg.q_input, N)]
        if self.layout.n_alphas:
            w.append(np.full(self.layout.n_alphas, cfg.alpha_penalty_weight))
        return np.concatenate(w)

    # ---------------- cost residuals ----------------

    def cost_residuals(self, z, need_jac=True):
        cfg = self.config
        N = cfg.horizon
        ref = self.reference
        vals = []
        rows_data = []
        n_res = ERR_DIM * (N + 1) + NU * N + self.layout.n_alphas
        row0 = 0
        coo_rows, coo_cols, coo_vals = [], [], []
        for i in range(N + 1):
            ssl = self.layout.state_slice(i)
            zi = z[ssl]
            if need_jac:
                jet = ad.seed(zi)
                e = pose_error_vector(jet, ref.positions[i], ref.quaternions[i], self.params)
                vals.append(e.val)
                _scatter(coo_rows, coo_cols, coo_vals, row0, ssl, e.jac)
            else:
                vals.append(np.asarray(pose_error_vector(
                    zi, ref.positions[i], ref.quaternions[i], self.params)))
            row0 += ERR_DIM
        for i in range(N):
            usl = self.layout.input_slice(i)
            vals.append(z[usl])
            if need_jac:
                _scatter(coo_rows, coo_cols, coo_vals, row0, usl, np.eye(NU))
            row0 += NU
        if self.layout.n_alphas:
            a0 = self.layout.base_alpha
            asl = slice(a0, a0 + self.layout.n_alphas)
            vals.append(1.0 - z[asl])
            if need_jac:
                _scatter(coo_rows, coo_cols, coo_vals, row0, asl,
                         -np.eye(self.layout.n_alphas))
            row0 += self.layout.n_alphas
        r = np.concatenate(vals)
        if not need_jac:
            return r, None, self._weights
        J = sp.csr_matrix((np.concatenate(coo_vals) if coo_vals else np.zeros(0),
                           (np.concatenate(coo_rows) if coo_rows else np.zeros(0),
                            np.concatenate(coo_cols) if coo_cols else np.zeros(0))),
                          shape=(n_res, self.layout.dim))
        return r, J, self._weights

    # ---------------- constraints ----------------

    def eq_value(self, z):
        return self._eq(z, need_jac=False)[0]

    def eq_value_jac(self, z):
        return self._eq(z, need_jac=True)

    def ineq_value(self, z):
        return self._ineq(z, need_jac=False)[0]

    def ineq_value_jac(self, z):
        return self._ineq(z, need_jac=True)

    def _eq(self, z, need_jac):
        cfg = self.config
        N = cfg.horizon
        params = self.params
        vals = np.empty(self.n_eq)
        coo_rows, coo_cols, coo_vals = [], [], []
        row0 = 0
        for i in range(N):
            ssl = self.layout.state_slice(i)
            usl = self.layout.input_slice(i)
            nsl = self.layout.state_slice(i + 1)
            zi = z[ssl]
            ui = z[usl]
            zn = z[nsl]
            if need_jac:
                local = ad.seed(np.concatenate([zi, ui]))
                f = dyn.rk4_step_vector(local[:NX], local[NX:NX + NU], cfg.dt, params)
                vals[row0:row0 + NX] = zn - f.val
                _scatter(coo_rows, coo_cols, coo_vals, row0, ssl, -f.jac[:, :NX])
                _scatter(coo_rows, coo_cols, coo_vals, row0, usl, -f.jac[:, NX:])
                _scatter(coo_rows, coo_cols, coo_vals, row0, nsl, np.eye(NX))
            else:
                f = dyn.rk4_step_vector(zi, ui, cfg.dt, params)
                vals[row0:row0 + NX] = zn - f
            row0 += NX
        # dual stationarity rows per block, on X_{i+1}
        for i, blocks in sorted(self._blocks_by_knot.items()):
            nsl = self.layout.state_slice(i + 1)
            poses = self._poses_at(z, nsl, need_jac)
            for blk in blocks:
                R, x, njet = poses[blk.body_id]
                lam = z[blk.dual_slice]
                if need_jac:
                    ns = NX + blk.num_duals
                    R_l, _ = _lift_pose(R, x, ns)
                    lam_jet = ad.Jet(lam, _eye_cols(blk.num_duals, ns, NX))
                    s = blk.stationarity_rows(R_l, lam_jet[:blk.num_obs_faces],
                                              lam_jet[blk.num_obs_faces:])
                    vals[row0:row0 + 3] = s.val
                    _scatter(coo_rows, coo_cols, coo_vals, row0, nsl, s.jac[:, :NX])
                    _scatter(coo_rows, coo_cols, coo_vals, row0, blk.dual_slice,
                             s.jac[:, NX:])
                else:
                    s = blk.stationarity_rows(R, lam[:blk.num_obs_faces],
                                              lam[blk.num_obs_faces:])
                    vals[row0:row0 + 3] = np.asarray(s)
                row0 += 3
        if not need_jac:
            return vals, None
        J = _assemble(coo_rows, coo_cols, coo_vals, self.n_eq, self.layout.dim)
        return vals, J

    def _ineq(self, z, need_jac):
        cfg = self.config
        N = cfg.horizon
        params = self.params
        n_rob = params.num_robots
        t_min2 = cfg.t_min ** 2
        vals = np.empty(self.n_in)
        coo_rows, coo_cols, coo_vals = [], [], []
        row0 = 0
        for i in range(1, N + 1):
            ssl = self.layout.state_slice(i)
            zi = z[ssl]
            if need_jac:
                jet = ad.seed(zi)
                T = dyn.tensions_vector(jet, params)
                for k in range(n_rob):
                    Tk = T[3 * k:3 * k + 3]
                    g = ad.dot(Tk, Tk) * -1.0 + t_min2
                    vals[row0] = g.val
                    _scatter(coo_rows, coo_cols, coo_vals, row0, ssl, g.jac[None, :])
                    row0 += 1
            else:
                T = dyn.tensions_vector(zi, params)
                for k in range(n_rob):
                    Tk = T[3 * k:3 * k + 3]
                    vals[row0] = t_min2 - float(Tk @ Tk)
                    row0 += 1
        for i, blocks in sorted(self._blocks_by_knot.items()):
            nsl = self.layout.state_slice(i + 1)
            poses = self._poses_at(z, nsl, need_jac)
            for blk in blocks:
                R, x, _ = poses[blk.body_id]
                lam = z[blk.dual_slice]
                alpha = z[blk.alpha_index]
                if need_jac:
                    ns = NX + blk.num_duals + 1
                    _, x_l = _lift_pose(R, x, ns)
                    lam_jet = ad.Jet(lam, _eye_cols(blk.num_duals, ns, NX))
                    a_jet = ad.Jet(np.asarray(alpha), _unit_row(ns, NX + blk.num_duals))
                    m = blk.margin_row(x_l, lam_jet[:blk.num_obs_faces],
                                       lam_jet[blk.num_obs_faces:], a_jet)
                    vals[row0] = m.val
                    _scatter(coo_rows, coo_cols, coo_vals, row0, nsl, m.jac[None, :NX])
                    _scatter(coo_rows, coo_cols, coo_vals, row0, blk.dual_slice,
                             m.jac[None, NX:NX + blk.num_duals])
                    coo_rows.append(np.array([row0]))
                    coo_cols.append(np.array([blk.alpha_index]))
                    coo_vals.append(np.array([m.jac[-1]]))
                    row0 += 1
                    lam_only = ad.seed(lam)
                    nr = blk.norm_row(lam_only[:blk.num_obs_faces])
                    vals[row0] = nr.val
                    _scatter(coo_rows, coo_cols, coo_vals, row0, blk.dual_slice,
                             nr.jac[None, :])
                    row0 += 1
                else:
                    m, _, nr = None, None, None
                    mval = blk.margin_row(x, lam[:blk.num_obs_faces],
                                          lam[blk.num_obs_faces:], float(alpha))
                    vals[row0] = float(ad.value(mval))
                    row0 += 1
                    nval = blk.norm_row(lam[:blk.num_obs_faces])
                    vals[row0] = float(ad.value(nval))
                    row0 += 1
        if not need_jac:
            return vals, None
        J = _assemble(coo_rows, coo_cols, coo_vals, self.n_in, self.layout.dim)
        return vals, J

    def _poses_at(self, z, state_slice, need_jac):
        """Body poses (R, x) at one knot, as Jets over that knot's state.

        Memoized on the knot's state bytes: the equality and inequality
        evaluators and every merit trial share poses at unchanged knots.
        """
        zi = z[state_slice]
        key = (state_slice.start, bool(need_jac), zi.tobytes())
        hit = self._pose_cache.get(key)
        if hit is not None:
            return hit
        src = ad.seed(zi) if need_jac else zi
        out = {}
        for body in self._bodies_needed:
            R, x = cbf.body_pose_vector(src, self.params, body)
            out[body] = (R, x, need_jac)
        if len(self._pose_cache) > 1024:
            self._pose_cache.clear()
        self._pose_cache[key] = out
        return out

    # ---------------- NLP assembly ----------------

    def build_nlp(self, world_bounds=None):
        lb, ub = self.bounds(world_bounds)
        cost = nlp.LeastSquaresCost(self.cost_residuals, name="horizon cost")
        eq = _BoundFunction(self.eq_value, self.eq_value_jac, "dynamics/stationarity")
        ineq = _BoundFunction(self.ineq_value, self.ineq_value_jac, "tension/barrier")
        return nlp.NLPProblem(decision_dim=self.layout.dim, cost=cost,
                              eq_constraints=eq, ineq_constraints=ineq,
                              lower=lb, upper=ub)

    def initial_guess(self, warm=None):
        """Shifted previous solution when provided; otherwise states seeded
        along the reference at capped speed with slerped attitude and hover
        wrench. Dual variables start at their X0 certificates."""
        z = np.zeros(self.layout.dim)
        N = self.config.horizon
        if warm is not None and warm.shape == (self.layout.dim,):
            z[:] = warm
        else:
            from .rotations import slerp
            cfg = self.config
            x0 = self.x0.x
            q0 = self.x0.q
            hover = self.params.hover_force
            for i in range(N + 1):
                target = self.reference.positions[min(i, N)]
                d = target - x0
                dist = float(np.linalg.norm(d))
                reach = cfg.max_velocity * cfg.dt * 0.8 * i
                pos = x0 + d * (min(dist, reach) / (dist + 1e-12))
                s = self.layout.state_slice(i).start
                z[s:s + 3] = pos
                z[s + 3:s + 7] = slerp(q0, self.reference.quaternions[min(i, N)], i / N)
                z[s + 13:s + 16] = hover
            for i in range(N):
                a = self.layout.state_slice(i).start
                b = self.layout.state_slice(i + 1).start
                z[a + 7:a + 10] = (z[b:b + 3] - z[a:a + 3]) / cfg.dt
            z[self.layout.state_slice(0)] = self.x0.as_vector()
        if self.layout.n_alphas:
            a0 = self.layout.base_alpha
            if warm is None or not np.any(z[a0:a0 + N]):
                z[a0:a0 + N] = 1.0
        if self.layout.blocks and (warm is None or not _has_dual_mass(z, self.layout)):
            from .geometry import min_distance_dual
            certs = {}
            for (body, oi) in self.h0:
                pose = cbf.body_pose(self.x0, self.params, body)
                poly = cbf.body_polytope(self.params, body)
                certs[(body, oi)] = min_distance_dual(poly, pose, self.obstacles[oi])
            for blk in self.layout.blocks:
                cert = certs[(blk.body_id, blk.obstacle_id)]
                z[blk.dual_slice] = np.concatenate([cert.lambda_obs, cert.lambda_body])
        return z


def _has_dual_mass(z, layout):
    return any(np.abs(z[b.dual_slice]).max() > 1e-12 for b in layout.blocks)


class _BoundFunction:
    def __init__(self, value_fn, value_jac_fn, name):
        self._value = value_fn
        self._value_jac = value_jac_fn
        self.name = name

    def value(self, x):
        return self._value(x)

    def value_jac(self, x):
        return self._value_jac(x)


def _scatter(rows, cols, vals, row0, col_slice, block):
    block = np.atleast_2d(np.asarray(block, dtype=float))
    r, c = block.shape
    cidx = np.arange(col_slice.start, col_slice.stop)
    rows.append(np.repeat(np.arange(row0, row0 + r), c))
    cols.append(np.tile(cidx, r))
    vals.append(block.ravel())


def _assemble(rows, cols, vals, n_rows, n_cols):
    if not rows:
        return sp.csr_matrix((n_rows, n_cols))
    return sp.csr_matrix((np.concatenate(vals),
                          (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n_rows, n_cols))


def _lift_pose(R, x, nseeds):
    """Extend pose Jets from state-only seeds to the block's joint basis."""
    if isinstance(R, ad.Jet):
        Rj = np.zeros(R.val.shape + (nseeds,))
        Rj[..., :R.jac.shape[-1]] = R.jac
        xj = np.zeros(x.val.shape + (nseeds,))
        xj[..., :x.jac.shape[-1]] = x.jac
        return ad.Jet(R.val, Rj), ad.Jet(x.val, xj)
    return R, x


def _eye_cols(n, nseeds, offset):
    J = np.zeros((n, nseeds))
    J[:, offset:offset + n] = np.eye(n)
    return J


def _unit_row(nseeds, idx):
    v = np.zeros(nseeds)
    v[idx] = 1.0
    return v


# --------------------------------------------------------------------------
# solve wrappers and the receding-horizon loop
# --------------------------------------------------------------------------

@dataclass
class HorizonPlan:
    states: list
    inputs: list
    alphas: np.ndarray
    duals: dict
    status: str
    solve_time: float
    iterations: int
    kkt: dict
    raw_point: np.ndarray
    layout: HorizonLayout
    elastic: bool = False
    row_multipliers: np.ndarray | None = None

    @property
    def converged(self):
        return self.status == "converged"

    def max_dynamics_defect(self, config, params):
        worst = 0.0
        for i in range(len(self.inputs)):
            pred = dyn.step(self.states[i], self.inputs[i], config.dt, params)
            worst = max(worst, float(np.abs(
                pred.as_vector() - self.states[i + 1].as_vector()).max()))
        return worst


def build_horizon_problem(x0, reference, environment, config, params):
    """Assemble the transcription for one solve; returns the
    :class:`HorizonProblem` (use ``.build_nlp()`` for the raw NLP)."""
    active = cbf.active_obstacles(x0, params, environment.obstacles, config.safety)
    return HorizonProblem(x0, reference, environment.obstacles, active, config, params)


def solve_horizon(x0, reference, environment, config, params, warm_start=None,
                  warm_multipliers=None):
    """Build and solve one horizon problem, decoding the typed plan."""
    hp = build_horizon_problem(x0, reference, environment, config, params)
    problem = hp.build_nlp(world_bounds=environment.world_bounds)
    guess = hp.initial_guess(warm=warm_start)
    if warm_multipliers is not None and warm_multipliers.size != hp.n_eq + hp.n_in + hp.layout.dim:
        warm_multipliers = None
    t0 = time.perf_counter()
    sol = nlp.solve(problem, nlp.SolverOptions(
        tol=config.sqp_tol, opt_tol=config.sqp_opt_tol,
        max_iter=config.sqp_max_iter, qp_max_iter=config.qp_max_iter,
        warm_start=guess, warm_multipliers=warm_multipliers))
    elapsed = time.perf_counter() - t0
    states, inputs, alphas, duals = hp.layout.decode(sol.point)
    return HorizonPlan(states=states, inputs=inputs, alphas=alphas, duals=duals,
                       status=sol.status, solve_time=elapsed,
                       iterations=sol.iterations, kkt=sol.kkt,
                       raw_point=sol.point, layout=hp.layout, elastic=sol.elastic,
                       row_multipliers=sol.row_multipliers)


@dataclass
class Trajectory:
    dt: float
    states: list
    inputs: list
    status: str = "success"          # success | stalled | infeasible | max_iters
    reached_goal: bool = False
    solve_log: list = field(default_factory=list)

    @property
    def duration(self):
        return self.dt * len(self.inputs)


def shift_warm_start(plan, config, params):
    """Shift a solved horizon one knot forward for the next warm start.

    The new tail knot extends the old one under the brake input (wrench
    pulled toward hover), which keeps the seeded tail clear of the velocity
    and force boxes that a zero-input extension can violate.
    """
    layout = plan.layout
    z = np.zeros(layout.dim)
    N = layout.N
    for i in range(N):
        z[layout.state_slice(i)] = plan.states[i + 1].as_vector()
    u_tail = _brake_input(plan.states[N], config, params)
    tail = dyn.step(plan.states[N], u_tail, config.dt, params)
    z[layout.state_slice(N)] = tail.as_vector()
    for i in range(N - 1):
        z[layout.input_slice(i)] = plan.inputs[i + 1].as_vector()
    z[layout.input_slice(N - 1)] = u_tail.as_vector()
    if layout.n_alphas:
        a0 = layout.base_alpha
        z[a0:a0 + N - 1] = plan.alphas[1:]
        z[a0 + N - 1] = 1.0
    for blk in layout.blocks:
        key_next = (min(blk.knot + 1, N - 1), blk.body_id, blk.obstacle_id)
        if key_next in plan.duals:
            z[blk.dual_slice] = plan.duals[key_next]
    return z


def goal_error(state, goal):
    pos_err = float(np.linalg.norm(state.x - goal.position))
    orn_err = quat_angle(state.q, goal.quaternion)
    return pos_err, orn_err


def plan(start, goal, environment, config, params, reference_mode="global"):
    """Receding-horizon planning loop from a start state to a goal pose.

    ``reference_mode`` selects the cost reference: "goal" holds the goal
    pose at every knot (prone to local minima, kept as the baseline), while
    "global" tracks positions resampled along a coarse A* path.

    Returns the realized :class:`Trajectory`; on stall or solver failure a
    partial trajectory is returned with a matching status flag.
    """
    if reference_mode not in ("goal", "global"):
        raise PlannerError(f"unknown reference mode {reference_mode!r}")
    n_knots = config.horizon + 1
    goal_ref = Reference.hold(goal, n_knots)
    path = None
    if reference_mode == "global":
        path = _global_path(start, goal, environment, config, params)
    state = start
    states = [state]
    inputs = []
    log = []
    warm = None
    warm_mults = None
    prev_active = None
    best_err = np.inf
    stall_count = 0
    fail_count = 0
    status = "max_iters"
    reached = False
    for it in range(config.max_receding_iters):
        pos_err, orn_err = goal_error(state, goal)
        if pos_err <= config.goal_pos_tolerance and orn_err <= config.goal_orn_tolerance:
            status = "success"
            reached = True
            break
        err = pos_err + orn_err
        if err < best_err - 1e-3:
            best_err = err
            stall_count = 0
        else:
            stall_count += 1
            if stall_count >= config.stall_iters:
                status = "stalled"
                break
        if path is not None and path.reachable:
            reference = gp.make_reference(path, goal.quaternion, config,
                                          from_position=state.x)
            reference = _pad_reference(reference, n_knots)
            reference = _shape_reference_orientation(
                reference, state, goal, environment, config, params)
        else:
            reference = goal_ref
        active = cbf.active_obstacles(state, params, environment.obstacles,
                                      config.safety)
        if active != prev_active:
            warm = None      # layout changed; rebuild the guess and duals
            warm_mults = None
        prev_active = active
        try:
            hplan = solve_horizon(state, reference, environment, config, params,
                                  warm_start=warm, warm_multipliers=warm_mults)
        except StartInCollisionError:
            status = "infeasible"
            break
        log.append({"status": hplan.status, "solve_time": hplan.solve_time,
                    "sqp_iterations": hplan.iterations,
                    "active_obstacles": list(active),
                    "kkt_primal": hplan.kkt.get("primal", np.nan)})
        usable = (hplan.converged
                  or (hplan.status == "max_iter"
                      and hplan.kkt.get("primal", np.inf) <= 1e-6))
        if not usable and hplan.kkt.get("primal", np.inf) <= 1e-3:
            # partially converged: the first input may still be usable; the
            # realized step is exactly integrated, so verify safety directly
            usable = _first_step_safe(state, hplan.inputs[0], active,
                                      environment, config, params)
        if not usable:
            fail_count += 1
            if fail_count > 4:
                status = "infeasible"
                break
            brake = _brake_input(state, config, params)
            state = dyn.step(state, brake, config.dt, params)
            states.append(state)
            inputs.append(brake)
            warm = None
            warm_mults = None
            continue
        fail_count = 0
        u0 = hplan.inputs[0]
        state = dyn.step(state, u0, config.dt, params)
        states.append(state)
        inputs.append(u0)
        warm = shift_warm_start(hplan, config, params)
        warm_mults = hplan.row_multipliers
    return Trajectory(dt=config.dt, states=states, inputs=inputs,
                      status=status, reached_goal=reached, solve_log=log)


def _pad_reference(reference, n_knots):
    if reference.positions.shape[0] >= n_knots:
        return Reference(reference.positions[:n_knots],
                         reference.quaternions[:n_knots], reference.source)
    pad = n_knots - reference.positions.shape[0]
    return Reference(
        np.vstack([reference.positions,
                   np.repeat(reference.positions[-1][None, :], pad, axis=0)]),
        np.vstack([reference.quaternions,
                   np.repeat(reference.quaternions[-1][None, :], pad, axis=0)]),
        reference.source)


def _global_path(start, goal, environment, config, params):
    """Coarse A* path for the payload position, or None when unavailable
    (the loop then falls back to the goal-only reference).

    The grid is first built with the conservative circumradius inflation
    (reference trackable at any payload orientation); if that closes every
    route, a second pass uses the payload inradius instead, which lets the
    reference thread gaps the payload can only pass by reorienting.
    """
    verts = params.payload_polytope.vertices()
    circumradius = float(np.linalg.norm(verts, axis=1).max())
    inradius = float(np.min(params.payload_polytope.B /
                            np.linalg.norm(params.payload_polytope.A, axis=1)))
    for body_margin in (circumradius, inradius):
        inflation = body_margin + config.safety.obstacle_inflation
        try:
            grid = gp.rasterize(environment.obstacles, environment.world_bounds,
                                config.grid_resolution, inflation)
            start_cell = gp.nearest_free_cell(grid, start.x)
            goal_cell = gp.nearest_free_cell(grid, goal.position)
            path = gp.astar(grid, start_cell, goal_cell)
        except gp.PlanningGridError:
            continue
        if path.reachable:
            # cell centers quantize the endpoints; steer the reference to the
            # exact start and goal so the terminal pull lands inside tolerance
            path.waypoints = np.vstack([start.x[None, :], path.waypoints,
                                        goal.position[None, :]])
            return path
    return None


def _first_step_safe(state, u0, active_ids, environment, config, params):
    """True when applying u0 keeps every body at a positive barrier against
    the active obstacles and all cables taut."""
    try:
        nxt = dyn.step(state, u0, config.dt, params)
        for oi in active_ids:
            obs = environment.obstacles[oi]
            for body in cbf.body_ids(params):
                if cbf.barrier_value(nxt, body, obs, params, config.safety) < 0.0:
                    return False
        tension_norms = dyn.state_tensions(nxt, params).norms()
        return bool(np.all(tension_norms >= config.t_min))
    except dyn.DynamicsError:
        return False


def _brake_input(state, config, params):
    """Rate-limited pull of the wrench back toward hover."""
    dF = np.clip((params.hover_force - state.force) / config.dt,
                 -config.max_force_rate, config.max_force_rate)
    dM = np.clip(-state.moment / config.dt,
                 -config.max_moment_rate, config.max_moment_rate)
    return dyn.SystemInput(dF, dM)
