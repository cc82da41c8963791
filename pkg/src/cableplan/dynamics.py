"""Payload rigid-body dynamics, cable tension distribution, and the
robot/quad-cable geometry induced by the planner state.

The planner state is X = [x_L, q_L, v_L, Omega_L, F, M] (19 numbers) with
inputs U = [F_dot, M_dot]. F is the total cable force in the inertial
frame, M the total moment in the payload frame; individual cable tensions
follow from the minimum-norm distribution T = P^T (P P^T)^-1 W.
"""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import GeometryError, HalfspacePolytope, RigidPose, make_cuboid
from .rotations import hamilton, mat3, quat_derivative, rotmat, skew

GRAVITY = np.array([0.0, 0.0, 9.81])

# state vector layout
IDX_POS = slice(0, 3)
IDX_QUAT = slice(3, 7)
IDX_VEL = slice(7, 10)
IDX_OMEGA = slice(10, 13)
IDX_FORCE = slice(13, 16)
IDX_MOMENT = slice(16, 19)
NX = 19
NU = 6

T_MIN_DEFAULT = 1e-3


class DynamicsError(ValueError):
    pass


class DegenerateTensionError(DynamicsError):
    """Raised when a cable tension is too small to define a direction."""

    def __init__(self, cable_index, magnitude):
        self.cable_index = cable_index
        self.magnitude = magnitude
        super().__init__(
            f"cable {cable_index} tension {magnitude:.3e} N below minimum; "
            "direction undefined (slack cable)")


@dataclass(frozen=True)
class PayloadParams:
    """Physical payload description shared by planner and simulator."""
    mass: float
    inertia: np.ndarray
    attach_points: np.ndarray          # (n, 3) in the payload frame
    cable_lengths: np.ndarray          # (n,)
    payload_polytope: HalfspacePolytope
    quadcable_polytope: HalfspacePolytope
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    t_min: float = T_MIN_DEFAULT

    def __post_init__(self):
        J = np.asarray(self.inertia, dtype=float).reshape(3, 3)
        rho = np.atleast_2d(np.asarray(self.attach_points, dtype=float))
        lengths = np.asarray(self.cable_lengths, dtype=float).ravel()
        g = np.asarray(self.gravity, dtype=float).ravel()
        if self.mass <= 0.0:
            raise DynamicsError("payload mass must be positive")
        if np.abs(J - J.T).max() > 1e-12:
            raise DynamicsError("inertia must be symmetric")
        if np.linalg.eigvalsh(J).min() <= 0.0:
            raise DynamicsError("inertia must be positive definite")
        n = rho.shape[0]
        if n < 3:
            raise DynamicsError("at least 3 cables are required")
        if lengths.shape != (n,) or np.any(lengths <= 0.0):
            raise DynamicsError("cable lengths must be positive, one per robot")
        object.__setattr__(self, "inertia", J)
        object.__setattr__(self, "attach_points", rho)
        object.__setattr__(self, "cable_lengths", lengths)
        object.__setattr__(self, "gravity", g)
        P = wrench_matrix_from_attach_points(rho)
        if np.linalg.matrix_rank(P, tol=1e-9) < 6:
            raise DynamicsError("attach points give a rank-deficient wrench map")
        object.__setattr__(self, "_inertia_inv", np.linalg.inv(J))
        object.__setattr__(self, "_P", P)
        object.__setattr__(self, "_P_pinv", P.T @ np.linalg.inv(P @ P.T))

    @property
    def num_robots(self):
        return self.attach_points.shape[0]

    @property
    def hover_force(self):
        """Inertial cable force that holds the payload static."""
        return self.mass * self.gravity


@dataclass(frozen=True)
class SystemState:
    x: np.ndarray            # payload position, inertial
    q: np.ndarray            # payload attitude quaternion, scalar-first
    v: np.ndarray            # payload velocity, inertial
    omega: np.ndarray        # payload angular velocity, payload frame
    force: np.ndarray        # total cable force, inertial
    moment: np.ndarray       # total cable moment, payload frame

    def __post_init__(self):
        for name in ("x", "q", "v", "omega", "force", "moment"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if abs(np.linalg.norm(self.q) - 1.0) > 1e-9:
            raise DynamicsError(f"quaternion norm {np.linalg.norm(self.q)} != 1")

    def as_vector(self):
        return np.concatenate([self.x, self.q, self.v, self.omega, self.force, self.moment])

    @staticmethod
    def from_vector(z):
        z = np.asarray(z, dtype=float).ravel()
        return SystemState(z[IDX_POS], z[IDX_QUAT], z[IDX_VEL],
                           z[IDX_OMEGA], z[IDX_FORCE], z[IDX_MOMENT])

    @property
    def rotation(self):
        return rotmat(self.q)

    def pose(self):
        return RigidPose(self.rotation, self.x)


@dataclass(frozen=True)
class SystemInput:
    force_rate: np.ndarray   # d/dt of the total cable force, N/s
    moment_rate: np.ndarray  # d/dt of the total moment, N*m/s

    def __post_init__(self):
        for name in ("force_rate", "moment_rate"):
            val = np.asarray(getattr(self, name), dtype=float).ravel()
            if not np.all(np.isfinite(val)):
                raise DynamicsError(f"non-finite input {name}: {val}")
            object.__setattr__(self, name, val)

    def as_vector(self):
        return np.concatenate([self.force_rate, self.moment_rate])

    @staticmethod
    def from_vector(z):
        z = np.asarray(z, dtype=float).ravel()
        return SystemInput(z[:3], z[3:6])

    @staticmethod
    def zero():
        return SystemInput(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class BodyWrench:
    force: np.ndarray        # payload frame
    moment: np.ndarray       # payload frame

    def as_vector(self):
        return np.concatenate([np.asarray(self.force, float).ravel(),
                               np.asarray(self.moment, float).ravel()])


@dataclass(frozen=True)
class CableTensionSet:
    tensions: np.ndarray     # (n, 3), payload frame

    def norms(self):
        return np.linalg.norm(self.tensions, axis=1)


def hover_state(position, quaternion, params):
    """Static-equilibrium state at the given payload pose."""
    return SystemState(x=position, q=quaternion, v=np.zeros(3),
                       omega=np.zeros(3), force=params.hover_force,
                       moment=np.zeros(3))


def wrench_matrix_from_attach_points(attach_points):
    n = attach_points.shape[0]
    P = np.zeros((6, 3 * n))
    for k in range(n):
        P[:3, 3 * k:3 * k + 3] = np.eye(3)
        P[3:, 3 * k:3 * k + 3] = skew(attach_points[k])
    return P


def wrench_matrix(params):
    """6 x 3n map from stacked cable tensions (payload frame) to the wrench."""
    return params._P.copy()


def distribute_tensions(wrench, params):
    """Minimum-norm tensions realizing a payload-frame wrench: T = P^+(PP^T)W."""
    W = wrench.as_vector() if isinstance(wrench, BodyWrench) else np.asarray(wrench, float).ravel()
    T = params._P_pinv @ W
    return CableTensionSet(tensions=T.reshape(-1, 3))


def cable_directions(tensions, R_L, t_min=T_MIN_DEFAULT):
    """Unit cable directions (payload frame and inertial) from the tensions.

    The direction points from the robot toward the attach point, opposite
    the tension the cable exerts on the payload.
    """
    T = tensions.tensions
    norms = np.linalg.norm(T, axis=1)
    for k, nrm in enumerate(norms):
        if nrm < t_min:
            raise DegenerateTensionError(k, float(nrm))
    xi_L = -T / norms[:, None]
    xi = xi_L @ np.asarray(R_L, float).T
    return xi_L, xi


def state_tensions(state, params):
    """Tensions induced by the state's own wrench (F rotated into the frame L)."""
    F_L = state.rotation.T @ state.force
    return distribute_tensions(BodyWrench(force=F_L, moment=state.moment), params)


def robot_positions(state, params):
    """Inertial positions of all robots under the taut-cable assumption."""
    tensions = state_tensions(state, params)
    xi_L, _ = cable_directions(tensions, state.rotation, params.t_min)
    R = state.rotation
    offsets = params.attach_points - params.cable_lengths[:, None] * xi_L
    return state.x + offsets @ R.T


def quadcable_pose(state, params, k):
    """Pose of the k-th quad-cable frame: origin at the cable midpoint,
    z-axis opposite the cable direction.

    When the cable is (numerically) parallel to the inertial x-axis the
    frame construction degenerates; the y-axis falls back to the cross
    product with e2 instead.
    """
    tensions = state_tensions(state, params)
    xi_L, xi = cable_directions(tensions, state.rotation, params.t_min)
    xi_k = xi[k]
    w = np.cross(np.array([1.0, 0.0, 0.0]), xi_k)
    if np.linalg.norm(w) < 1e-6:
        w = np.cross(np.array([0.0, 1.0, 0.0]), xi_k)
    col_y = -w / np.linalg.norm(w)
    col_x = np.cross(w, xi_k)
    col_x = col_x / np.linalg.norm(col_x)
    R_qc = np.column_stack([col_x, col_y, -xi_k])
    attach = state.x + state.rotation @ params.attach_points[k]
    origin = attach - 0.5 * params.cable_lengths[k] * xi_k
    return RigidPose(R_qc, origin)


def continuous_derivative(state, u, params):
    """Time derivative of the 19-dim state vector (Newton-Euler payload)."""
    J = params.inertia
    Jinv = params._inertia_inv
    x_dot = state.v
    q_dot = quat_derivative(state.q, state.omega)
    v_dot = state.force / params.mass - params.gravity
    w = state.omega
    omega_dot = Jinv @ (state.moment - np.cross(w, J @ w))
    return np.concatenate([x_dot, q_dot, v_dot, omega_dot,
                           u.force_rate, u.moment_rate])


def step(state, u, dt, params):
    """One explicit RK4 step followed by exact quaternion renormalization."""
    if dt <= 0.0:
        raise DynamicsError("dt must be positive")
    z = state.as_vector()
    uvec = u.as_vector()
    z_next = rk4_step_vector(z, uvec, dt, params)
    q = z_next[IDX_QUAT]
    z_next[IDX_QUAT] = q / np.linalg.norm(q)
    return SystemState.from_vector(z_next)


# --- vector-form dynamics shared with the transcription (autodiff-safe) ---

def derivative_vector(z, u, params):
    """continuous_derivative over raw vectors; works on ndarray or Jet."""
    q = z[IDX_QUAT]
    v = z[IDX_VEL]
    w = z[IDX_OMEGA]
    F = z[IDX_FORCE]
    M = z[IDX_MOMENT]
    q_dot = quat_derivative(q, w)
    v_dot = F * (1.0 / params.mass) - params.gravity
    Jw = ad.matvec(params.inertia, w)
    omega_dot = ad.matvec(params._inertia_inv, M - ad.cross(w, Jw))
    return ad.concat([v, q_dot, v_dot, omega_dot, u[:3], u[3:6]])


def rk4_step_vector(z, u, dt, params, renormalize=True):
    """RK4 + quaternion renormalization over raw vectors (autodiff-safe)."""
    k1 = derivative_vector(z, u, params)
    k2 = derivative_vector(z + k1 * (dt / 2.0), u, params)
    k3 = derivative_vector(z + k2 * (dt / 2.0), u, params)
    k4 = derivative_vector(z + k3 * dt, u, params)
    z_next = z + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)
    if not renormalize:
        return z_next
    q = z_next[IDX_QUAT]
    qn = q * (ad.dot(q, q) ** -0.5)
    return ad.concat([z_next[IDX_POS], qn, z_next[IDX_VEL],
                      z_next[IDX_OMEGA], z_next[IDX_FORCE], z_next[IDX_MOMENT]])


def tensions_vector(z, params):
    """Stacked payload-frame tensions as a function of the raw state vector."""
    R = rotmat(z[IDX_QUAT])
    F_L = ad.matvec(ad.transpose(R), z[IDX_FORCE])
    W = ad.concat([F_L, z[IDX_MOMENT]])
    return ad.matvec(params._P_pinv, W)


def quadcable_pose_vector(z, params, k):
    """(R_qc 3x3, origin) for quad-cable body k from the raw state.

    Mirrors :func:`quadcable_pose` but stays autodiff-safe so the planner
    can differentiate obstacle constraints through the tension chain. The
    e1 || cable singularity is handled by the same e2 fallback branch.
    """
    R = rotmat(z[IDX_QUAT])
    T = tensions_vector(z, params)
    Tk = T[3 * k:3 * k + 3]
    xi_L = Tk * (-(ad.dot(Tk, Tk) ** -0.5))
    xi = ad.matvec(R, xi_L)
    e1 = np.array([1.0, 0.0, 0.0])
    w = ad.cross(e1, xi)
    if float(ad.value(ad.dot(w, w))) < 1e-12:
        w = ad.cross(np.array([0.0, 1.0, 0.0]), xi)
    col_y = w * (-(ad.dot(w, w) ** -0.5))
    cx = ad.cross(w, xi)
    col_x = cx * (ad.dot(cx, cx) ** -0.5)
    col_z = xi * -1.0
    R_qc_rows = ad.stack([
        ad.stack([col_x[0], col_y[0], col_z[0]]),
        ad.stack([col_x[1], col_y[1], col_z[1]]),
        ad.stack([col_x[2], col_y[2], col_z[2]]),
    ])
    attach = z[IDX_POS] + ad.matvec(R, params.attach_points[k])
    origin = attach - xi * (0.5 * params.cable_lengths[k])
    return R_qc_rows, origin


def default_triangle_params(side=1.0, mass=0.196, height=0.1, cable_length=1.0,
                            quadcable_dims=(0.15, 0.15, 1.0)):
    """Equilateral triangular plate payload carried by three robots at its
    corners, with the quad-cable cuboid template sized to the cable."""
    r = side / np.sqrt(3.0)  # circumradius
    angles = np.array([np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3])
    verts2d = np.column_stack([r * np.cos(angles), r * np.sin(angles)])
    from .geometry import make_prism
    payload_poly = make_prism(verts2d, height, frame_id="payload")
    attach = np.column_stack([verts2d, np.full(3, height / 2.0)])
    # uniform triangular prism: I_xy = m (s^2/24 + h^2/12), I_z = m s^2/12
    ixy = mass * (side ** 2 / 24.0 + height ** 2 / 12.0)
    iz = mass * side ** 2 / 12.0
    dims = np.asarray(quadcable_dims, dtype=float)
    qc_poly = make_cuboid(dims / 2.0, frame_id="quadcable")
    return PayloadParams(
        mass=mass,
        inertia=np.diag([ixy, ixy, iz]),
        attach_points=attach,
        cable_lengths=np.full(3, cable_length),
        payload_polytope=payload_poly,
        quadcable_polytope=qc_poly,
    )
