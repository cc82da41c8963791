"""Sparse nonlinear programming: SQP with an ADMM convex-QP subproblem.

The solver minimizes a smooth cost subject to smooth equality/inequality
constraints and box bounds. Search directions come from a convex QP built
with a Gauss-Newton Hessian (when the cost is a weighted least-squares
form) or damped BFGS; steps are globalized with an L1-penalty merit line
search. Infeasible QP subproblems fall back to an elastic relaxation with
a large slack penalty.

Constraint and cost callables must provide first derivatives (analytic or
automatic differentiation); plain callables are wrapped with central
finite differences, which the planner never relies on (its expressions
carry forward-mode Jacobians) but keeps small test problems convenient.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu


class NLPError(RuntimeError):
    pass


class EvaluationError(NLPError):
    def __init__(self, expression, point):
        preview = np.array2string(np.asarray(point), max_line_width=79,
                                  threshold=8, precision=4)
        super().__init__(f"non-finite value in {expression!r} at point {preview}")
        self.expression = expression
        self.point = np.asarray(point)


def _fd_jacobian(fn, x, eps=1e-7):
    f0 = np.atleast_1d(fn(x))
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        xp = x.copy(); xp[i] += eps
        xm = x.copy(); xm[i] -= eps
        J[:, i] = (np.atleast_1d(fn(xp)) - np.atleast_1d(fn(xm))) / (2 * eps)
    return J


class VectorFunction:
    """Vector-valued constraint expression with Jacobian access."""

    def __init__(self, fn, jac=None, name="constraint"):
        self._fn = fn
        self._jac = jac
        self.name = name

    def value(self, x):
        return np.atleast_1d(np.asarray(self._fn(x), dtype=float))

    def value_jac(self, x):
        c = self.value(x)
        if self._jac is not None:
            J = self._jac(x)
        else:
            J = _fd_jacobian(self._fn, x)
        if not sp.issparse(J):
            J = sp.csr_matrix(np.atleast_2d(np.asarray(J, dtype=float)))
        return c, J.tocsr()


class ScalarCost:
    """Generic smooth cost; BFGS supplies the curvature model."""

    def __init__(self, fn, grad=None, name="cost"):
        self._fn = fn
        self._grad = grad
        self.name = name

    def value(self, x):
        return float(self._fn(x))

    def value_grad(self, x):
        f = self.value(x)
        if self._grad is not None:
            g = np.asarray(self._grad(x), dtype=float).ravel()
        else:
            g = _fd_jacobian(lambda z: self._fn(z), x).ravel()
        return f, g

    gauss_newton = None


class LeastSquaresCost:
    """Weighted least-squares cost f = sum_i w_i r_i(x)^2 with residual
    Jacobians, enabling the Gauss-Newton Hessian 2 J^T W J."""

    def __init__(self, residual_fn, name="cost"):
        self._residuals = residual_fn
        self.name = name

    def value(self, x):
        r, _, w = self._residuals(x, need_jac=False)
        return float(np.dot(w * r, r))

    def value_grad(self, x):
        r, J, w = self._residuals(x, need_jac=True)
        f = float(np.dot(w * r, r))
        g = 2.0 * (J.T @ (w * r))
        return f, np.asarray(g).ravel()

    def gauss_newton(self, x):
        r, J, w = self._residuals(x, need_jac=True)
        J = J.tocsr() if sp.issparse(J) else sp.csr_matrix(J)
        f = float(np.dot(w * r, r))
        g = 2.0 * np.asarray(J.T @ (w * r)).ravel()
        H = 2.0 * (J.T @ sp.diags(w) @ J)
        return f, g, H.tocsc()


@dataclass
class NLPProblem:
    """min cost(x) s.t. eq(x) = 0, ineq(x) <= 0, lb <= x <= ub."""
    decision_dim: int
    cost: object
    eq_constraints: VectorFunction | None = None
    ineq_constraints: VectorFunction | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        n = self.decision_dim
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if callable(self.cost) and not hasattr(self.cost, "value_grad"):
            self.cost = ScalarCost(self.cost)
        if self.eq_constraints is not None and not hasattr(self.eq_constraints, "value_jac"):
            self.eq_constraints = VectorFunction(self.eq_constraints, name="eq")
        if self.ineq_constraints is not None and not hasattr(self.ineq_constraints, "value_jac"):
            self.ineq_constraints = VectorFunction(self.ineq_constraints, name="ineq")


@dataclass
class SolverOptions:
    tol: float = 1e-6
    max_iter: int = 200
    warm_start: np.ndarray | None = None
    warm_multipliers: np.ndarray | None = None
    qp_max_iter: int = 1500
    qp_eps: float = 1e-7
    hessian_reg: float = 1e-3
    opt_tol: float | None = None     # stationarity/complementarity; tol if None
    elastic_penalty: float = 1e4
    verbose: bool = False


@dataclass
class Multipliers:
    eq: np.ndarray
    ineq: np.ndarray
    bounds: np.ndarray  # signed; >0 pushes against upper bound


@dataclass
class NLPSolution:
    point: np.ndarray
    cost_value: float
    status: str                      # converged | max_iter | infeasible
    kkt: dict
    multipliers: Multipliers
    iterations: int
    elastic: bool = False
    row_multipliers: np.ndarray | None = None


# --------------------------------------------------------------------------
# ADMM QP:  min 1/2 x^T P x + q^T x   s.t.  l <= A x <= u
# --------------------------------------------------------------------------

@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray
    status: str            # solved | max_iter | primal_infeasible | dual_infeasible
    iterations: int
    prim_res: float
    dual_res: float


def solve_qp(P, q, A, l, u, x0=None, y0=None, eps=1e-9, max_iter=4000,
             rho=0.1, sigma=1e-6, over_relax=1.6):
    """OSQP-style ADMM with Ruiz equilibration, adaptive rho, and an
    active-set polish pass. Equality rows (l == u) get a stiffer rho.

    When warm multipliers are supplied, the active-set refinement runs
    first; if it already reaches a KKT point (typical across warm-started
    SQP iterations) the ADMM loop is skipped entirely.
    """
    n = q.size
    m = A.shape[0]
    P = sp.csc_matrix(P)
    A = sp.csc_matrix(A)
    q = np.asarray(q, dtype=float).copy()
    l = np.asarray(l, dtype=float).copy()
    u = np.asarray(u, dtype=float).copy()

    if y0 is not None and m:
        x_r, y_r = _polish(P, q, A, l, u,
                           np.zeros(n) if x0 is None else np.asarray(x0, float),
                           np.asarray(y0, float))
        score = _kkt_refine_score(P, q, A, l, u, x_r, y_r)
        scale = 1.0 + _inf(q)
        if score <= 1e-8 * scale:
            return QPResult(x=x_r, y=y_r, status="solved", iterations=0,
                            prim_res=score, dual_res=score)

    D, E, c_scale, Ps, qs, As, ls, us = _ruiz_equilibrate(P, q, A, l, u)

    x = np.zeros(n) if x0 is None else np.asarray(x0, float) / D
    y = np.zeros(m) if y0 is None else np.asarray(y0, float) * E * c_scale
    z = As @ x

    is_eq = (ls == us) if m else np.zeros(0, dtype=bool)

    def rho_vec_for(base):
        r = np.full(m, base)
        r[is_eq] = base * 1e3
        return np.clip(r, 1e-6, 1e6)

    rho_vec = rho_vec_for(rho)
    solver = _KKTSolver(Ps, As, sigma, rho_vec)

    status = "max_iter"
    it = 0
    check_every = 25
    prim_window = np.inf
    for it in range(1, max_iter + 1):
        rhs = np.concatenate([sigma * x - qs, z - y / rho_vec])
        sol = solver.solve(rhs)
        x_t = sol[:n]
        nu = sol[n:]
        z_t = z + (nu - y) / rho_vec
        x_new = over_relax * x_t + (1 - over_relax) * x
        z_bar = over_relax * z_t + (1 - over_relax) * z
        z_new = np.clip(z_bar + y / rho_vec, ls, us)
        y_new = y + rho_vec * (z_bar - z_new)

        dx = x_new - x
        dy = y_new - y
        x, z, y = x_new, z_new, y_new

        if it % check_every == 0 or it == max_iter:
            Ax = As @ x
            Px = Ps @ x
            Aty = As.T @ y
            prim = np.max(np.abs(Ax - z)) if m else 0.0
            dual = np.max(np.abs(Px + qs + Aty))
            eps_prim = eps + eps * max(_inf(Ax), _inf(z))
            eps_dual = eps + eps * max(_inf(Px), _inf(qs), _inf(Aty))
            if prim <= eps_prim and dual <= eps_dual:
                status = "solved"
                break
            if _primal_infeasible(As, dy, ls, us) and prim > 1e-6:
                status = "primal_infeasible"
                break
            if _dual_infeasible(Ps, qs, As, dx, ls, us):
                status = "dual_infeasible"
                break
            # stalled primal residual: bail early so the caller can go elastic
            if it >= 150 and prim > 1e-3 and prim > 0.5 * prim_window:
                break
            prim_window = prim
            # adaptive rho
            scale_p = prim / max(_inf(Ax), _inf(z), 1e-12)
            scale_d = dual / max(_inf(Px), _inf(qs), _inf(Aty), 1e-12)
            ratio = np.sqrt(scale_p / max(scale_d, 1e-16))
            if ratio > 5.0 or ratio < 0.2:
                rho = float(np.clip(rho * ratio, 1e-6, 1e6))
                rho_vec = rho_vec_for(rho)
                solver = _KKTSolver(Ps, As, sigma, rho_vec)

    # unscale
    x_out = D * x
    y_out = y * E / c_scale
    if status in ("solved", "max_iter"):
        x_out, y_out = _polish(P, q, A, l, u, x_out, y_out)
    Ax = A @ x_out if m else np.zeros(0)
    prim = float(np.max(np.abs(Ax - np.clip(Ax, l, u)))) if m else 0.0
    dual = float(np.max(np.abs(P @ x_out + q + (A.T @ y_out if m else 0.0))))
    if status == "max_iter" and prim <= 1e-6 and dual <= 1e-6:
        status = "solved"
    return QPResult(x=x_out, y=y_out, status=status, iterations=it,
                    prim_res=prim, dual_res=dual)


def _inf(v):
    return float(np.max(np.abs(v))) if v.size else 0.0


class _KKTSolver:
    def __init__(self, P, A, sigma, rho_vec):
        n = P.shape[0]
        m = A.shape[0]
        KKT = sp.bmat([
            [P + sigma * sp.eye(n), A.T if m else None],
            [A if m else None, -sp.diags(1.0 / rho_vec) if m else None],
        ], format="csc")
        self._lu = splu(KKT)

    def solve(self, rhs):
        return self._lu.solve(rhs)


def _ruiz_equilibrate(P, q, A, l, u, iters=10):
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    Ps, qs, As = P.copy(), q.copy(), A.copy()
    ls, us = l.copy(), u.copy()
    for _ in range(iters):
        colP = _col_inf_norms(Ps)
        colA = _col_inf_norms(As) if m else np.zeros(n)
        d = 1.0 / np.sqrt(np.maximum(np.maximum(colP, colA), 1e-10))
        e = (1.0 / np.sqrt(np.maximum(_row_inf_norms(As), 1e-10))) if m else np.zeros(0)
        Dm = sp.diags(d)
        Ps = (Dm @ Ps @ Dm).tocsc()
        qs = d * qs
        if m:
            Em = sp.diags(e)
            As = (Em @ As @ Dm).tocsc()
            ls = e * ls
            us = e * us
            E *= e
        D *= d
        gamma = 1.0 / max(np.mean(np.maximum(_col_inf_norms(Ps), 1e-10)), _inf(qs), 1e-10)
        Ps = (gamma * Ps).tocsc()
        qs = gamma * qs
        c *= gamma
    return D, E, c, Ps, qs, As, ls, us


def _col_inf_norms(M):
    if M.shape[0] == 0 or M.nnz == 0:
        return np.zeros(M.shape[1])
    return np.asarray(abs(M).max(axis=0).todense()).ravel()


def _row_inf_norms(M):
    if M.shape[1] == 0 or M.nnz == 0:
        return np.zeros(M.shape[0])
    return np.asarray(abs(M).max(axis=1).todense()).ravel()


def _primal_infeasible(A, dy, l, u, tol=1e-10):
    nrm = _inf(dy)
    if nrm < 1e-14:
        return False
    dyn_ = dy / nrm
    if _inf((A.T @ dyn_)) > tol * 1e4:
        return False
    lf = np.where(np.isfinite(l), l, 0.0)
    uf = np.where(np.isfinite(u), u, 0.0)
    val = uf @ np.maximum(dyn_, 0) + lf @ np.minimum(dyn_, 0)
    bad = (np.maximum(dyn_, 0)[~np.isfinite(u)].sum()
           - np.minimum(dyn_, 0)[~np.isfinite(l)].sum())
    return bad < 1e-12 and val < -1e-8


def _dual_infeasible(P, q, A, dx, l, u, tol=1e-10):
    nrm = _inf(dx)
    if nrm < 1e-14:
        return False
    dxn = dx / nrm
    if _inf(P @ dxn) > tol * 1e4 or q @ dxn > -1e-8:
        return False
    Adx = A @ dxn if A.shape[0] else np.zeros(0)
    for j, v in enumerate(Adx):
        if v > 1e-8 and np.isfinite(u[j]):
            return False
        if v < -1e-8 and np.isfinite(l[j]):
            return False
    return True


def _polish(P, q, A, l, u, x, y, max_passes=20, tol=1e-6):
    """Active-set refinement seeded by the ADMM iterate.

    Repeatedly solves the equality-constrained KKT system on the working
    set, dropping constraints whose multiplier sign is wrong and adding
    rows the candidate violates. ADMM supplies a near-correct active set,
    so this usually terminates in a few sparse factorizations and lifts the
    solution to near machine precision. The incoming iterate is kept
    whenever refinement fails to improve the KKT score.
    """
    n = P.shape[0]
    m = A.shape[0]
    P = sp.csc_matrix(P)
    if m == 0:
        try:
            x_new = splu(P + 1e-12 * sp.eye(n, format="csc")).solve(-q)
        except RuntimeError:
            return x, y
        return (x_new, y) if _inf(P @ x_new + q) < _inf(P @ x + q) else (x, y)
    is_eq = l == u
    Ax = A @ x
    scale_l = 1.0 + np.abs(np.where(np.isfinite(l), l, 0.0))
    scale_u = 1.0 + np.abs(np.where(np.isfinite(u), u, 0.0))
    low_active = np.isfinite(l) & (Ax - l <= tol * scale_l)
    upp_active = np.isfinite(u) & (u - Ax <= tol * scale_u)
    low_active |= (y < -tol) & np.isfinite(l)
    upp_active |= (y > tol) & np.isfinite(u)
    upp_active |= is_eq
    best = (x, y, _kkt_refine_score(P, q, A, l, u, x, y))
    for _ in range(max_passes):
        active = low_active | upp_active
        idx = np.nonzero(active)[0]
        A_act = A[idx]
        b_act = np.where(upp_active[idx], u[idx], l[idx])
        k = idx.size
        KKT = sp.bmat([[P, A_act.T], [A_act, -1e-11 * sp.eye(k)]], format="csc") \
            if k else (P + 1e-12 * sp.eye(n, format="csc"))
        rhs = np.concatenate([-q, b_act]) if k else -q
        try:
            lu = splu(KKT)
        except RuntimeError:
            break
        sol = lu.solve(rhs)
        for _ in range(2):
            sol = sol + lu.solve(rhs - KKT @ sol)
        x_new = sol[:n]
        y_new = np.zeros(m)
        if k:
            y_new[idx] = sol[n:]
        score = _kkt_refine_score(P, q, A, l, u, x_new, y_new)
        if score < best[2]:
            best = (x_new, y_new, score)
        # wrong-sign multipliers leave the working set
        drop_low = low_active & ~is_eq & (y_new > tol)
        drop_upp = upp_active & ~is_eq & (y_new < -tol)
        # violated inactive rows join it
        Axn = A @ x_new
        viol_low = np.isfinite(l) & (Axn < l - tol * scale_l) & ~(low_active | upp_active)
        viol_upp = np.isfinite(u) & (Axn > u + tol * scale_u) & ~(low_active | upp_active)
        if not (np.any(drop_low) or np.any(drop_upp) or np.any(viol_low) or np.any(viol_upp)):
            break
        low_active = (low_active & ~drop_low) | viol_low
        upp_active = (upp_active & ~drop_upp) | viol_upp | is_eq
    return best[0], best[1]


def _kkt_refine_score(P, q, A, l, u, x, y):
    Ax = A @ x if A.shape[0] else np.zeros(0)
    pr = _inf(Ax - np.clip(Ax, l, u)) if A.shape[0] else 0.0
    du = _inf(P @ x + q + (A.T @ y if A.shape[0] else 0.0))
    return max(pr, du)


# --------------------------------------------------------------------------
# SQP driver
# --------------------------------------------------------------------------

def solve(problem: NLPProblem, options: SolverOptions | None = None) -> NLPSolution:
    """Solve the NLP to a KKT point (or a diagnosable non-convergence).

    Deterministic for identical problems and options. Raises
    :class:`EvaluationError` when an expression produces non-finite values.
    """
    opts = options or SolverOptions()
    opt_tol = opts.opt_tol if opts.opt_tol is not None else opts.tol
    n = problem.decision_dim
    lb, ub = problem.lower, problem.upper
    x = np.clip(opts.warm_start if opts.warm_start is not None else np.zeros(n), lb, ub)
    x = np.asarray(x, dtype=float)

    bfgs_B = None
    penalty = 1.0
    y_rows = opts.warm_multipliers
    elastic_used = False
    status = "max_iter"
    it_done = 0
    kkt = {}
    mults = Multipliers(np.zeros(0), np.zeros(0), np.zeros(n))
    lm_damp = max(opts.hessian_reg, 1e-8)
    # QP accuracy tracks outer progress: loose while far from a KKT point,
    # tightening as the measured residuals shrink
    qp_eps = max(opts.qp_eps, 3e-5)

    for it in range(1, opts.max_iter + 1):
        it_done = it
        f, g, H, c_eq, J_eq, c_in, J_in = _evaluate(problem, x, bfgs_state=None)
        if H is None:
            if bfgs_B is None:
                bfgs_B = np.eye(n)
            H = sp.csc_matrix(bfgs_B)
        else:
            # adaptive proximal floor on the Hessian diagonal: Gauss-Newton
            # leaves constraint-only variables (dual certificates) with zero
            # curvature, which stalls the QP; the floor only damps steps and
            # cannot move the KKT point the outer loop converges to. The
            # damping grows on rejected steps, Levenberg-Marquardt style.
            dH = H.diagonal()
            H = (H + sp.diags(np.where(dH < lm_damp, lm_damp - dH, 0.0))).tocsc()
        m_eq, m_in = c_eq.size, c_in.size

        A_qp, l_qp, u_qp = _qp_rows(J_eq, c_eq, J_in, c_in, lb, ub, x, n)
        qp = solve_qp(H, g, A_qp, l_qp, u_qp,
                      y0=y_rows if y_rows is not None and y_rows.size == A_qp.shape[0] else None,
                      eps=qp_eps, max_iter=opts.qp_max_iter)
        if qp.status == "primal_infeasible" or (qp.status == "max_iter" and qp.prim_res > 1e-4):
            qp = _solve_elastic(H, g, J_eq, c_eq, J_in, c_in, lb, ub, x, n,
                                opts.elastic_penalty, opts.qp_eps, opts.qp_max_iter)
            elastic_used = True
        d = qp.x[:n]
        y_rows = qp.y[:m_eq + m_in + n] if qp.y.size >= m_eq + m_in + n else qp.y
        y_eq = y_rows[:m_eq]
        y_in = np.maximum(y_rows[m_eq:m_eq + m_in], 0.0)
        y_box = y_rows[m_eq + m_in:m_eq + m_in + n]

        if m_eq + m_in:
            penalty = max(penalty, min(2.0 * _inf(np.concatenate([y_eq, y_in])), 1e5))

        viol0 = _l1_violation(c_eq, c_in)
        merit0 = f + penalty * viol0
        deriv = float(g @ d) - penalty * viol0
        step = 1.0
        accepted = False
        f_new = f
        for _ in range(25):
            x_trial = np.clip(x + step * d, lb, ub)
            f_trial = problem.cost.value(x_trial)
            ce_t = problem.eq_constraints.value(x_trial) if problem.eq_constraints else np.zeros(0)
            ci_t = problem.ineq_constraints.value(x_trial) if problem.ineq_constraints else np.zeros(0)
            if np.isfinite(f_trial) and np.all(np.isfinite(ce_t)) and np.all(np.isfinite(ci_t)):
                merit_t = f_trial + penalty * _l1_violation(ce_t, ci_t)
                if merit_t <= merit0 + 1e-4 * step * min(deriv, 0.0) + 1e-12 * (1 + abs(merit0)):
                    accepted = True
                    f_new = f_trial
                    break
            step *= 0.5
        if not accepted:
            step = 0.0
        if accepted and step == 1.0:
            lm_damp = max(opts.hessian_reg, lm_damp / 3.0)
        elif step < 0.25:
            lm_damp = min(1e3, lm_damp * 5.0)

        # BFGS update needs gradients at old and new points
        if problem.cost.gauss_newton is None and step > 0.0:
            x_new = np.clip(x + step * d, lb, ub)
            _, g_new = problem.cost.value_grad(x_new)
            ge_old, ge_new = _lagrangian_grad(g, J_eq, J_in, y_eq, y_in), None
            _, gnew_only, _, _, J_eq_n, _, J_in_n = (None,) * 7
            # re-evaluate constraint Jacobians at the new point for the update
            _, _, _, ce_n, J_eq_n, ci_n, J_in_n = _evaluate(problem, x_new, bfgs_state=None,
                                                            hessian=False)
            ge_new = _lagrangian_grad(g_new, J_eq_n, J_in_n, y_eq, y_in)
            s = x_new - x
            yv = ge_new - ge_old
            bfgs_B = _damped_bfgs(bfgs_B if bfgs_B is not None else np.eye(n), s, yv)

        x = np.clip(x + step * d, lb, ub)

        # KKT at the new point with QP multipliers
        f, g, _, c_eq, J_eq, c_in, J_in = _evaluate(problem, x, bfgs_state=None, hessian=False)
        mults = Multipliers(eq=y_eq, ineq=y_in, bounds=y_box)
        kkt = _kkt_norms(g, c_eq, J_eq, c_in, J_in, x, lb, ub, mults)
        gscale = 1.0 + _inf(g)
        qp_eps = float(np.clip(0.05 * max(kkt["primal"],
                                          kkt["stationarity"] / gscale),
                               opts.qp_eps, 3e-5))
        if (kkt["stationarity"] <= opt_tol * gscale
                and kkt["primal"] <= opts.tol
                and kkt["complementarity"] <= opt_tol * gscale):
            status = "converged"
            break
        if step == 0.0 and _inf(d) < 1e-12:
            status = "converged" if kkt["primal"] <= opts.tol else "infeasible"
            break
        if step == 0.0 and lm_damp >= 1e3:
            status = "infeasible" if kkt["primal"] > 1e-3 else "max_iter"
            break

    if kkt.get("primal", np.inf) > 1e-3:
        status = "infeasible"
    return NLPSolution(point=x, cost_value=problem.cost.value(x), status=status,
                       kkt=kkt, multipliers=mults, iterations=it_done,
                       elastic=elastic_used, row_multipliers=y_rows)


def kkt_residual(problem, point, multipliers):
    """Stationarity / primal / dual feasibility / complementarity norms."""
    x = np.asarray(point, dtype=float)
    _, g = problem.cost.value_grad(x)
    c_eq, J_eq = (problem.eq_constraints.value_jac(x)
                  if problem.eq_constraints else (np.zeros(0), sp.csr_matrix((0, x.size))))
    c_in, J_in = (problem.ineq_constraints.value_jac(x)
                  if problem.ineq_constraints else (np.zeros(0), sp.csr_matrix((0, x.size))))
    return _kkt_norms(g, c_eq, J_eq, c_in, J_in, x, problem.lower, problem.upper, multipliers)


def _kkt_norms(g, c_eq, J_eq, c_in, J_in, x, lb, ub, mults):
    stat = g.copy()
    if c_eq.size:
        stat = stat + J_eq.T @ mults.eq
    if c_in.size:
        stat = stat + J_in.T @ mults.ineq
    stat = stat + mults.bounds
    lo_viol = np.maximum(lb - x, 0.0)
    hi_viol = np.maximum(x - ub, 0.0)
    primal = max(_inf(c_eq), float(np.max(c_in)) if c_in.size else 0.0, _inf(lo_viol), _inf(hi_viol))
    dual = max(float(np.max(-mults.ineq)) if mults.ineq.size else 0.0, 0.0)
    compl = 0.0
    if c_in.size:
        compl = float(np.max(np.abs(mults.ineq * c_in)))
    slack_lo = np.where(np.isfinite(lb), x - lb, 0.0)
    slack_hi = np.where(np.isfinite(ub), ub - x, 0.0)
    compl = max(compl,
                _inf(np.minimum(np.abs(mults.bounds) * slack_lo, np.abs(mults.bounds) * slack_hi)))
    return {"stationarity": _inf(stat), "primal": max(primal, 0.0),
            "dual": dual, "complementarity": compl}


def _lagrangian_grad(g, J_eq, J_in, y_eq, y_in):
    out = g.copy()
    if y_eq.size:
        out = out + J_eq.T @ y_eq
    if y_in.size:
        out = out + J_in.T @ y_in
    return np.asarray(out).ravel()


def _damped_bfgs(B, s, y, damping=0.2):
    sBs = float(s @ (B @ s))
    if sBs <= 1e-16 or _inf(s) < 1e-14:
        return B
    sy = float(s @ y)
    if sy < damping * sBs:
        theta = (1 - damping) * sBs / (sBs - sy)
        y = theta * y + (1 - theta) * (B @ s)
        sy = float(s @ y)
    Bs = B @ s
    return B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy


def _l1_violation(c_eq, c_in):
    v = 0.0
    if c_eq.size:
        v += float(np.abs(c_eq).sum())
    if c_in.size:
        v += float(np.maximum(c_in, 0.0).sum())
    return v


def _evaluate(problem, x, bfgs_state=None, hessian=True):
    cost = problem.cost
    if hessian and cost.gauss_newton is not None:
        f, g, H = cost.gauss_newton(x)
    else:
        f, g = cost.value_grad(x)
        H = None
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise EvaluationError(cost.name, x)
    if problem.eq_constraints is not None:
        c_eq, J_eq = problem.eq_constraints.value_jac(x)
        if not np.all(np.isfinite(c_eq)):
            raise EvaluationError(problem.eq_constraints.name, x)
    else:
        c_eq, J_eq = np.zeros(0), sp.csr_matrix((0, x.size))
    if problem.ineq_constraints is not None:
        c_in, J_in = problem.ineq_constraints.value_jac(x)
        if not np.all(np.isfinite(c_in)):
            raise EvaluationError(problem.ineq_constraints.name, x)
    else:
        c_in, J_in = np.zeros(0), sp.csr_matrix((0, x.size))
    return f, g, H, c_eq, J_eq, c_in, J_in


def _qp_rows(J_eq, c_eq, J_in, c_in, lb, ub, x, n):
    blocks = []
    lo, hi = [], []
    if c_eq.size:
        blocks.append(J_eq)
        lo.append(-c_eq)
        hi.append(-c_eq)
    if c_in.size:
        blocks.append(J_in)
        lo.append(np.full(c_in.size, -np.inf))
        hi.append(-c_in)
    blocks.append(sp.eye(n, format="csr"))
    lo.append(lb - x)
    hi.append(ub - x)
    A = sp.vstack(blocks, format="csc")
    return A, np.concatenate(lo), np.concatenate(hi)


def _solve_elastic(H, g, J_eq, c_eq, J_in, c_in, lb, ub, x, n, penalty, eps, max_iter):
    """Relax constraint rows with nonnegative slacks at an L1 penalty."""
    m_eq, m_in = c_eq.size, c_in.size
    n_s = m_eq + m_in
    H_ext = sp.block_diag([H, 1e-8 * sp.eye(n_s)], format="csc")
    g_ext = np.concatenate([g, penalty * np.ones(n_s)])
    blocks, lo, hi = [], [], []
    if m_eq:
        # -s <= J d + c <= s  as two rows
        blocks.append(sp.hstack([J_eq, -sp.eye(m_eq), sp.csr_matrix((m_eq, m_in))]))
        lo.append(np.full(m_eq, -np.inf)); hi.append(-c_eq)
        blocks.append(sp.hstack([-J_eq, -sp.eye(m_eq), sp.csr_matrix((m_eq, m_in))]))
        lo.append(np.full(m_eq, -np.inf)); hi.append(c_eq)
    if m_in:
        blocks.append(sp.hstack([J_in, sp.csr_matrix((m_in, m_eq)), -sp.eye(m_in)]))
        lo.append(np.full(m_in, -np.inf)); hi.append(-c_in)
    blocks.append(sp.hstack([sp.eye(n), sp.csr_matrix((n, n_s))]))
    lo.append(lb - x); hi.append(ub - x)
    blocks.append(sp.hstack([sp.csr_matrix((n_s, n)), sp.eye(n_s)]))
    lo.append(np.zeros(n_s)); hi.append(np.full(n_s, np.inf))
    A = sp.vstack(blocks, format="csc")
    res = solve_qp(H_ext, g_ext, A, np.concatenate(lo), np.concatenate(hi),
                   eps=eps, max_iter=max_iter)
    # map multipliers back onto the original row layout (eq rows combine the
    # two elastic sides; ineq and box rows map directly)
    y = np.zeros(m_eq + m_in + n)
    ofs = 0
    if m_eq:
        y[:m_eq] = res.y[ofs:ofs + m_eq] - res.y[ofs + m_eq:ofs + 2 * m_eq]
        ofs += 2 * m_eq
    if m_in:
        y[m_eq:m_eq + m_in] = res.y[ofs:ofs + m_in]
        ofs += m_in
    y[m_eq + m_in:] = res.y[ofs:ofs + n]
    return QPResult(x=res.x[:n + 0], y=y, status=res.status, iterations=res.iterations,
                    prim_res=res.prim_res, dual_res=res.dual_res)
