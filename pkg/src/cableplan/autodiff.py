"""Minimal forward-mode automatic differentiation.

A :class:`Jet` carries a value array of shape S and the Jacobian of that
value with respect to a fixed seed basis, shape S + (nseeds,). Expression
code (dynamics steps, barrier rows) is written once over plain numpy
operations and evaluated either on ndarrays or on Jets; the functions in
this module dispatch on the input type.

Only the operations the planner expressions need are implemented; finite
differences remain available in the test suite as an independent oracle.
"""
import numpy as np


class Jet:
    __slots__ = ("val", "jac")
    # defer all numpy binary ops to the reflected Jet methods
    __array_ufunc__ = None

    def __init__(self, val, jac):
        self.val = np.asarray(val, dtype=float)
        self.jac = np.asarray(jac, dtype=float)

    @property
    def nseeds(self):
        return self.jac.shape[-1]

    def __repr__(self):
        return f"Jet(val={self.val!r}, nseeds={self.nseeds})"

    # --- indexing -------------------------------------------------------
    def __getitem__(self, idx):
        return Jet(self.val[idx], self.jac[idx])

    # --- arithmetic -----------------------------------------------------
    # (value shapes broadcast normally; the shared trailing seed axis keeps
    # the Jacobians broadcast-compatible under the same rules)
    def __add__(self, other):
        if isinstance(other, Jet):
            return Jet(self.val + other.val, self.jac + other.jac)
        val = self.val + np.asarray(other, dtype=float)
        jac = self.jac
        if val.shape != self.val.shape:
            jac = np.broadcast_to(jac, val.shape + jac.shape[-1:])
        return Jet(val, jac)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.val, -self.jac)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Jet) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet):
            return Jet(self.val * other.val,
                       _expand(other.val) * self.jac + _expand(self.val) * other.jac)
        other = np.asarray(other, dtype=float)
        return Jet(self.val * other, _expand(other) * self.jac)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * other ** -1.0
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        return self ** -1.0 * other

    def __pow__(self, p):
        dval = p * self.val ** (p - 1.0)
        return Jet(self.val ** p, _expand(dval) * self.jac)


def _expand(val):
    """Append the seed axis for broadcasting against a Jacobian."""
    return np.asarray(val, dtype=float)[..., None]


def seed(x):
    """Jet of an independent variable vector: identity Jacobian."""
    x = np.asarray(x, dtype=float)
    return Jet(x, np.eye(x.size).reshape(x.shape + (x.size,)))


def constant(x, nseeds):
    x = np.asarray(x, dtype=float)
    return Jet(x, np.zeros(x.shape + (nseeds,)))


def value(x):
    return x.val if isinstance(x, Jet) else np.asarray(x, dtype=float)


def jacobian(x):
    if isinstance(x, Jet):
        return x.jac
    raise TypeError("not a Jet")


def _nseeds_of(args):
    for a in args:
        if isinstance(a, Jet):
            return a.nseeds
    return None


def dot(a, b):
    """Inner product of two 1-D vectors."""
    if not isinstance(a, Jet) and not isinstance(b, Jet):
        return float(np.dot(a, b))
    ns = _nseeds_of((a, b))
    aj = a if isinstance(a, Jet) else constant(a, ns)
    bj = b if isinstance(b, Jet) else constant(b, ns)
    val = float(np.dot(aj.val, bj.val))
    jac = bj.val @ aj.jac + aj.val @ bj.jac
    return Jet(val, jac)


def cross(a, b):
    if not isinstance(a, Jet) and not isinstance(b, Jet):
        return np.cross(a, b)
    return stack([
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ])


def matvec(A, x):
    """Matrix-vector product; either side may be a Jet."""
    if not isinstance(A, Jet) and not isinstance(x, Jet):
        return np.asarray(A) @ np.asarray(x)
    ns = _nseeds_of((A, x))
    if isinstance(A, Jet):
        val = A.val @ value(x)
        jac = np.einsum("mks,k->ms", A.jac, value(x))
        if isinstance(x, Jet):
            jac = jac + A.val @ x.jac
        return Jet(val, jac)
    A = np.asarray(A, dtype=float)
    return Jet(A @ x.val, A @ x.jac)


def matmat(A, B):
    """Matrix-matrix product; either side may be a Jet."""
    if not isinstance(A, Jet) and not isinstance(B, Jet):
        return np.asarray(A) @ np.asarray(B)
    val = value(A) @ value(B)
    jac = None
    if isinstance(A, Jet):
        jac = np.einsum("iks,kj->ijs", A.jac, value(B))
    if isinstance(B, Jet):
        term = np.einsum("ik,kjs->ijs", value(A), B.jac)
        jac = term if jac is None else jac + term
    return Jet(val, jac)


def transpose(A):
    if isinstance(A, Jet):
        return Jet(A.val.T, np.transpose(A.jac, (1, 0, 2)))
    return np.asarray(A).T


def stack(items):
    """Stack scalars or equal-shape arrays along a new leading axis."""
    if not any(isinstance(it, Jet) for it in items):
        return np.stack([np.asarray(it, dtype=float) for it in items])
    ns = _nseeds_of(items)
    jets = [it if isinstance(it, Jet) else constant(it, ns) for it in items]
    return Jet(np.stack([j.val for j in jets]),
               np.stack([j.jac for j in jets]))


def concat(items):
    """Concatenate 1-D vectors (or scalars treated as length-1)."""
    if not any(isinstance(it, Jet) for it in items):
        return np.concatenate([np.atleast_1d(np.asarray(it, dtype=float)) for it in items])
    ns = _nseeds_of(items)
    jets = [it if isinstance(it, Jet) else constant(it, ns) for it in items]
    vals, jacs = [], []
    for j in jets:
        v = np.atleast_1d(j.val)
        jj = j.jac.reshape(v.shape + (ns,))
        vals.append(v)
        jacs.append(jj)
    return Jet(np.concatenate(vals), np.concatenate(jacs, axis=0))


def norm(v):
    return dot(v, v) ** 0.5
