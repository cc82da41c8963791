"""Quaternion and rotation helpers shared across the package.

Convention: quaternions are scalar-first [w, x, y, z] and follow the
Hamilton product. All functions accept plain numpy arrays and also work
with the forward-mode types from :mod:`cableplan.autodiff` (they only use
arithmetic, indexing and the ops re-exported there).
"""
import numpy as np


def hamilton(q1, q2):
    """Hamilton product q1 * q2 of two scalar-first quaternions."""
    w1, x1, y1, z1 = q1[0], q1[1], q1[2], q1[3]
    w2, x2, y2, z2 = q2[0], q2[1], q2[2], q2[3]
    return stack4(
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    )


def conjugate(q):
    return stack4(q[0], -q[1], -q[2], -q[3])


def rotmat(q):
    """Rotation matrix of a (nearly) unit scalar-first quaternion.

    The quaternion is normalized internally so the result is always a
    proper rotation even when the input has drifted off the unit sphere.
    """
    n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]
    s = n2 ** -0.5
    w, x, y, z = q[0] * s, q[1] * s, q[2] * s, q[3] * s
    return mat3(
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    )


def quat_derivative(q, omega):
    """q_dot = 0.5 * q (x) (0, omega), omega in the body frame."""
    w, x, y, z = q[0], q[1], q[2], q[3]
    ox, oy, oz = omega[0], omega[1], omega[2]
    return stack4(
        0.5 * (-x * ox - y * oy - z * oz),
        0.5 * (w * ox + y * oz - z * oy),
        0.5 * (w * oy + z * ox - x * oz),
        0.5 * (w * oz + x * oy - y * ox),
    )


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_from_yaw(yaw):
    return quat_from_axis_angle([0.0, 0.0, 1.0], yaw)


def normalize_quat(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_angle(q1, q2):
    """Geodesic angle between two unit quaternions (double cover folded)."""
    d = abs(float(np.dot(np.asarray(q1, float), np.asarray(q2, float))))
    return 2.0 * np.arccos(min(1.0, d))


def slerp(q1, q2, t):
    """Spherical interpolation on the hemisphere nearest to q1."""
    q1 = normalize_quat(q1)
    q2 = normalize_quat(q2)
    d = float(np.dot(q1, q2))
    if d < 0.0:
        q2, d = -q2, -d
    if d > 1.0 - 1e-12:
        return normalize_quat(q1 + t * (q2 - q1))
    theta = np.arccos(d)
    return (np.sin((1 - t) * theta) * q1 + np.sin(t * theta) * q2) / np.sin(theta)


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def stack4(a, b, c, d):
    """Stack four scalars into a 4-vector, preserving autodiff types."""
    if any(hasattr(x, "jac") for x in (a, b, c, d)):
        from .autodiff import stack
        return stack([a, b, c, d])
    return np.array([a, b, c, d], dtype=float)


def mat3(*entries):
    """Build a 3x3 matrix from nine scalars, preserving autodiff types."""
    if any(hasattr(x, "jac") for x in entries):
        from .autodiff import stack
        rows = [stack(list(entries[3 * i:3 * i + 3])) for i in range(3)]
        return stack(rows)
    return np.array(entries, dtype=float).reshape(3, 3)
