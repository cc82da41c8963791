"""Convex polytope geometry: halfspace representations, frame transforms,
and minimum-distance computation in primal and dual form.

Polytopes are stored as ``{y : A y <= B}``. The primal distance solver works
on enumerated vertices (minimum-norm point of the Minkowski difference via
Wolfe's algorithm); the dual solver maximizes the separation certificate
``-lam_obs B_obs - lam_body B_body`` over nonnegative multipliers with a
second-order cone program, so the two routes cross-check each other.
"""
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.optimize import linprog

CONTAIN_TOL = 1e-9
INERTIAL_FRAME = "inertial"


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class HalfspacePolytope:
    """Bounded convex body ``{y : A y <= B}`` expressed in ``frame_id``.

    Rows of ``A`` are face normals and are kept exactly as given (not
    normalized); the dual norm constraint uses the composite
    ``||lam_obs A_obs||`` so row scaling is absorbed by the multipliers.
    """
    A: np.ndarray
    B: np.ndarray
    frame_id: str = INERTIAL_FRAME
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).ravel()
        if A.shape[0] != B.shape[0] or A.shape[1] != 3:
            raise GeometryError(
                f"inconsistent halfspace system: A {A.shape}, B {B.shape}")
        if A.shape[0] < 4:
            raise GeometryError("a bounded 3D polytope needs at least 4 faces")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        lo, hi = _probe_bounding_box(A, B)
        self._cache["bbox"] = (lo, hi)

    @property
    def num_faces(self):
        return self.A.shape[0]

    @property
    def bounding_box(self):
        return self._cache["bbox"]

    def vertices(self):
        """Enumerated vertices (n, 3), computed lazily and cached."""
        if "vertices" not in self._cache:
            self._cache["vertices"] = _enumerate_vertices(self.A, self.B)
        return self._cache["vertices"]

    def inflate(self, margin):
        """Outward face offset by ``margin`` meters (conservative Minkowski
        sum with a ball: corners stay sharp instead of rounding)."""
        if margin < 0:
            raise GeometryError("inflation margin must be nonnegative")
        row_norms = np.linalg.norm(self.A, axis=1)
        return HalfspacePolytope(self.A, self.B + margin * row_norms, self.frame_id)


@dataclass(frozen=True)
class RigidPose:
    """Rotation + translation of a body frame relative to the inertial frame."""
    R: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        x = np.asarray(self.x, dtype=float).ravel()
        if x.shape != (3,):
            raise GeometryError("pose translation must be a 3-vector")
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > 1e-9 or np.linalg.det(R) < 0.0:
            raise GeometryError(f"rotation matrix not orthonormal (err={err:.2e})")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "x", x)

    @staticmethod
    def identity():
        return RigidPose(np.eye(3), np.zeros(3))

    def inverse(self):
        return RigidPose(self.R.T, -self.R.T @ self.x)

    def apply(self, points):
        """Map body-frame point(s) into the inertial frame."""
        return np.asarray(points, dtype=float) @ self.R.T + self.x


@dataclass(frozen=True)
class WitnessPair:
    """Closest points on two polytopes together with their separation."""
    y_a: np.ndarray
    y_b: np.ndarray
    distance: float


@dataclass(frozen=True)
class DualCertificate:
    """Nonnegative multipliers certifying a body/obstacle separation margin.

    ``value`` lower-bounds the true distance for any feasible multipliers
    (weak duality) and equals it at the optimum (strong duality).
    """
    lambda_body: np.ndarray
    lambda_obs: np.ndarray
    value: float

    @property
    def separated(self):
        return self.value > 0.0

    def residuals(self, A_body, B_body, A_obs, B_obs):
        """(stationarity, norm excess, value mismatch) against the given
        halfspace data, all expected ~0 for a valid certificate."""
        stat = np.linalg.norm(A_obs.T @ self.lambda_obs + A_body.T @ self.lambda_body)
        norm_excess = max(0.0, np.linalg.norm(A_obs.T @ self.lambda_obs) - 1.0)
        val = -float(self.lambda_obs @ B_obs) - float(self.lambda_body @ B_body)
        return stat, norm_excess, abs(val - self.value)


def make_cuboid(half_extents, center=(0.0, 0.0, 0.0), frame_id=INERTIAL_FRAME):
    """Axis-aligned cuboid with the given half extents around ``center``."""
    h = np.asarray(half_extents, dtype=float).ravel()
    c = np.asarray(center, dtype=float).ravel()
    if h.shape != (3,) or np.any(h <= 0.0):
        raise GeometryError(f"half extents must be three positive numbers, got {h}")
    A = np.vstack([np.eye(3), -np.eye(3)])
    B = np.concatenate([c + h, h - c])
    return HalfspacePolytope(A, B, frame_id)


def make_prism(base_vertices, height, frame_id=INERTIAL_FRAME):
    """Right prism over a convex CCW polygon, centered vertically at z = 0."""
    V = np.asarray(base_vertices, dtype=float)
    if V.ndim != 2 or V.shape[1] != 2 or V.shape[0] < 3:
        raise GeometryError("base must be a list of at least 3 planar points")
    if height <= 0.0:
        raise GeometryError("prism height must be positive")
    n = V.shape[0]
    scale = np.abs(V).max() + 1.0
    rows, offs = [], []
    for i in range(n):
        p, q = V[i], V[(i + 1) % n]
        e = q - p
        r = V[(i + 2) % n]
        # CCW convexity: the next vertex must lie strictly left of edge (p,q)
        if np.cross(e, r - p) <= 1e-12 * scale ** 2:
            raise GeometryError("base polygon must be convex and counterclockwise")
        normal = np.array([e[1], -e[0]])  # outward for CCW ordering
        nrm = np.linalg.norm(normal)
        if nrm < 1e-12 * scale:
            raise GeometryError("degenerate base edge")
        normal = normal / nrm
        rows.append([normal[0], normal[1], 0.0])
        offs.append(normal @ p)
    rows.append([0.0, 0.0, 1.0])
    offs.append(height / 2.0)
    rows.append([0.0, 0.0, -1.0])
    offs.append(height / 2.0)
    return HalfspacePolytope(np.array(rows), np.array(offs), frame_id)


def rotate_about_center(poly, R, center):
    """Rigidly rotate a polytope about a fixed point (same frame)."""
    R = np.asarray(R, dtype=float)
    c = np.asarray(center, dtype=float)
    A = poly.A @ R.T
    B = poly.B + A @ c - poly.A @ c
    return HalfspacePolytope(A, B, poly.frame_id)


def contains(poly, y, tol=CONTAIN_TOL):
    """True iff ``A y <= B + tol`` componentwise. ``y`` may be (3,) or (n, 3)."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        return bool(np.all(poly.A @ y <= poly.B + tol))
    return np.all(y @ poly.A.T <= poly.B + tol, axis=1)


def transform_obstacle(obs, body_pose):
    """Re-express an inertial-frame polytope in a body frame.

    For pose (R, x): A' = A R and B' = B - A x, so for any inertial point y
    inside the obstacle the body-frame point R^T (y - x) satisfies the
    transformed system (and conversely).
    """
    if obs.frame_id != INERTIAL_FRAME:
        raise GeometryError(
            f"transform_obstacle expects an inertial-frame polytope, got {obs.frame_id!r}")
    A = obs.A @ body_pose.R
    B = obs.B - obs.A @ body_pose.x
    return HalfspacePolytope(A, B, frame_id="body")


def _probe_bounding_box(A, B):
    """Axis-aligned bounding box via 6 LPs; raises if empty or unbounded."""
    lo = np.empty(3)
    hi = np.empty(3)
    for axis in range(3):
        for sign, out in ((1.0, hi), (-1.0, lo)):
            c = np.zeros(3)
            c[axis] = -sign
            res = linprog(c, A_ub=A, b_ub=B, bounds=[(None, None)] * 3,
                          method="highs")
            if res.status == 2:
                raise GeometryError("polytope is empty")
            if res.status == 3:
                raise GeometryError("polytope is unbounded")
            if not res.success:
                raise GeometryError(f"bounding-box probe failed: {res.message}")
            out[axis] = sign * -res.fun
    return lo, hi


def _enumerate_vertices(A, B, feas_tol=1e-9):
    """All vertices of {A y <= B} by intersecting face triples."""
    m = A.shape[0]
    idx = np.array(list(combinations(range(m), 3)))
    M = A[idx]                       # (t, 3, 3)
    rhs = B[idx]                     # (t, 3)
    dets = np.linalg.det(M)
    scale = np.abs(A).max() ** 3 + 1e-30
    keep = np.abs(dets) > 1e-10 * scale
    if not np.any(keep):
        raise GeometryError("no vertices found (degenerate polytope)")
    pts = np.linalg.solve(M[keep], rhs[keep][..., None])[..., 0]
    span = max(1.0, np.abs(pts).max())
    feasible = np.all(pts @ A.T <= B + feas_tol * span, axis=1)
    pts = pts[feasible]
    if pts.shape[0] < 4:
        raise GeometryError("polytope has fewer than 4 vertices")
    # merge duplicates coming from >3 faces meeting at a corner
    rounded = np.round(pts / (1e-9 * span)).astype(np.int64)
    _, unique_idx = np.unique(rounded, axis=0, return_index=True)
    return pts[np.sort(unique_idx)]


def min_norm_point(points, tol=1e-12, max_iter=None):
    """Wolfe's algorithm: minimum-norm point of conv(points).

    Returns (x, weights) with x = weights @ points, weights on the simplex.
    Terminates finitely for point sets in general position; ``tol`` scales
    with the squared data magnitude.
    """
    P = np.asarray(points, dtype=float)
    m = P.shape[0]
    if max_iter is None:
        max_iter = 16 * m + 64
    scale = max(1.0, float(np.max(np.sum(P * P, axis=1))))
    j0 = int(np.argmin(np.sum(P * P, axis=1)))
    support = [j0]
    w = np.array([1.0])
    x = P[j0].copy()
    for _ in range(max_iter):
        dots = P @ x
        j = int(np.argmin(dots))
        if x @ x - dots[j] <= tol * scale:
            break
        if j in support:
            break
        support.append(j)
        w = np.append(w, 0.0)
        while True:
            S = P[support]
            v = _affine_min_norm(S)
            if np.all(v > 1e-14):
                w = v
                break
            mask = w > v
            if not np.any(mask):
                w = np.maximum(v, 0.0)
                w = w / w.sum()
                break
            theta = np.min(w[mask] / (w[mask] - v[mask]))
            theta = min(1.0, max(0.0, theta))
            w = theta * v + (1.0 - theta) * w
            w[w < 1e-14] = 0.0
            keep = w > 0.0
            if keep.all():
                # numerical tie: accept current iterate
                break
            support = [s for s, k in zip(support, keep) if k]
            w = w[keep]
            w = w / w.sum()
        x = w @ P[support]
    weights = np.zeros(m)
    weights[np.array(support)] = w
    return x, weights


def _affine_min_norm(S):
    """Min-norm point of the affine hull of rows of S, in barycentric coords."""
    k = S.shape[0]
    G = S @ S.T
    KKT = np.zeros((k + 1, k + 1))
    KKT[:k, :k] = G
    KKT[:k, k] = 1.0
    KKT[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    try:
        sol = np.linalg.solve(KKT, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(KKT, rhs, rcond=None)
    return sol[:k]


def _world_vertices(poly, pose):
    return poly.vertices() @ pose.R.T + pose.x


def min_distance_primal(a, pose_a, b, pose_b):
    """Global minimum distance between two posed polytopes.

    Computed as the minimum-norm point of the pairwise vertex-difference
    cloud (the Minkowski difference of the two hulls); witnesses are
    recovered from the barycentric weights. Distance 0 with a shared
    witness indicates intersection.
    """
    Va = _world_vertices(a, pose_a)
    Vb = _world_vertices(b, pose_b)
    na, nb = Va.shape[0], Vb.shape[0]
    diff = (Va[:, None, :] - Vb[None, :, :]).reshape(na * nb, 3)
    x, weights = min_norm_point(diff)
    wmat = weights.reshape(na, nb)
    y_a = wmat.sum(axis=1) @ Va
    y_b = wmat.sum(axis=0) @ Vb
    d = float(np.linalg.norm(x))
    if d < 1e-9:
        y_b = y_a  # intersecting: report a common witness point
        d = 0.0
    return WitnessPair(y_a=y_a, y_b=y_b, distance=d)


def _support_multipliers(A, B, direction):
    """Min-cost multipliers: argmin lam . B s.t. A^T lam = direction, lam >= 0.

    By LP duality the optimal cost is the support function of {A y <= B} in
    ``direction``; HiGHS returns a vertex solution with tight residuals.
    """
    res = linprog(B, A_eq=A.T, b_eq=direction,
                  bounds=[(0.0, None)] * A.shape[0], method="highs")
    if not res.success:
        raise GeometryError(f"support multiplier LP failed: {res.message}")
    return np.maximum(res.x, 0.0), float(res.fun)


def _socp_separation_direction(A_body, B_body, A_obs, B_obs):
    """Solve the dual separation SOCP; returns (lam_obs, lam_body, value).

    maximize  -B_obs.lam_obs - B_body.lam_body
    s.t.      A_obs^T lam_obs + A_body^T lam_body = 0,  lam >= 0,
              ||A_obs^T lam_obs|| <= 1
    """
    from cvxopt import matrix, solvers
    mo, mb = A_obs.shape[0], A_body.shape[0]
    n = mo + mb
    c = matrix(np.concatenate([B_obs, B_body]))
    # cone rows: lam >= 0 (linear), then (1, A_obs^T lam_obs) in the SOC
    G_l = -np.eye(n)
    h_l = np.zeros(n)
    G_q = np.zeros((4, n))
    G_q[1:, :mo] = -A_obs.T
    h_q = np.array([1.0, 0.0, 0.0, 0.0])
    G = matrix(np.vstack([G_l, G_q]))
    h = matrix(np.concatenate([h_l, h_q]))
    Aeq = np.zeros((3, n))
    Aeq[:, :mo] = A_obs.T
    Aeq[:, mo:] = A_body.T
    opts = {"show_progress": False, "abstol": 1e-9, "reltol": 1e-9,
            "feastol": 1e-9, "maxiters": 200}
    sol = solvers.conelp(c, G, h, dims={"l": n, "q": [4], "s": []},
                         A=matrix(Aeq), b=matrix(np.zeros(3)), options=opts)
    if sol["x"] is None:
        return None
    lam = np.maximum(np.array(sol["x"]).ravel(), 0.0)
    return lam[:mo], lam[mo:], -float(np.concatenate([B_obs, B_body]) @ lam)


def min_distance_dual(body, body_pose, obs):
    """Dual separation certificate between a posed body and an inertial obstacle.

    The obstacle is first re-expressed in the body frame, then the dual of
    the minimum-distance program is solved as an SOCP. The raw solution is
    polished by re-solving the two support LPs along the recovered
    separating direction, which restores stationarity and the unit norm to
    solver precision (the certificate value is second-order insensitive to
    direction error, so the polished value matches the primal distance).

    Intersecting bodies yield a zero certificate with ``separated == False``.
    """
    obs_b = transform_obstacle(obs, body_pose)
    A_obs, B_obs = obs_b.A, obs_b.B
    A_body, B_body = body.A, body.B
    raw = _socp_separation_direction(A_body, B_body, A_obs, B_obs)
    if raw is None:
        raise GeometryError("dual separation SOCP did not return a point")
    lam_obs, lam_body, value = raw
    if value <= 1e-9:
        return DualCertificate(lambda_body=np.zeros(A_body.shape[0]),
                               lambda_obs=np.zeros(A_obs.shape[0]), value=0.0)
    u = A_obs.T @ lam_obs
    nu = np.linalg.norm(u)
    if nu < 1e-12:
        return DualCertificate(lambda_body=np.zeros(A_body.shape[0]),
                               lambda_obs=np.zeros(A_obs.shape[0]), value=0.0)
    u = u / nu
    lam_obs, _ = _support_multipliers(A_obs, B_obs, u)
    lam_body, _ = _support_multipliers(A_body, B_body, -u)
    # LP equality residuals can leave ||A_obs^T lam|| a hair above 1; shrink
    # both multiplier vectors together (preserves stationarity, value is
    # second-order insensitive to the common scale)
    excess = np.linalg.norm(A_obs.T @ lam_obs)
    if excess > 1.0:
        lam_obs = lam_obs / excess
        lam_body = lam_body / excess
    cert = DualCertificate(lambda_body=lam_body, lambda_obs=lam_obs,
                           value=-float(lam_obs @ B_obs) - float(lam_body @ B_body))
    stat, norm_excess, val_err = cert.residuals(A_body, B_body, A_obs, B_obs)
    if stat > 1e-7 or norm_excess > 1e-9 or val_err > 1e-7:
        raise GeometryError(
            f"dual certificate failed validation: stat={stat:.2e} "
            f"norm_excess={norm_excess:.2e} value_err={val_err:.2e}")
    return cert
