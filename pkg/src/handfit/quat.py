"""Unit-quaternion helpers for joint rotations.

Quaternions are numpy arrays laid out as ``(w, x, y, z)`` with the scalar part
first.  Every function accepts a single quaternion of shape ``(4,)`` or a
stack of shape ``(..., 4)`` unless stated otherwise.

``q`` and ``-q`` describe the same spatial rotation; the angle and
interpolation helpers identify them.
"""

from __future__ import annotations

import numpy as np

UNIT_TOL = 1e-6
_SMALL = 1e-8

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def _as_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != 4:
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("quaternion has non-finite components")
    return q


def _check_unit(q: np.ndarray, name: str = "q") -> None:
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        raise ValueError(f"{name} is not unit-norm (|{name}| = {np.ravel(n)[0]:.6g})")


def normalize(q) -> np.ndarray:
    q = _as_quat(q)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Rotation of ``angle`` radians about the unit vector ``axis``."""
    axis = np.asarray(axis, dtype=float)
    if axis.shape != (3,):
        raise ValueError(f"axis must be a 3-vector, got shape {axis.shape}")
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("axis has zero length")
    if abs(n - 1.0) > UNIT_TOL:
        raise ValueError(f"axis must be unit length, got |axis| = {n:.9g}")
    if not np.isfinite(angle):
        raise ValueError("angle must be finite")
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def hamilton_product(a, b) -> np.ndarray:
    a = _as_quat(a)
    b = _as_quat(b)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def conjugate(q) -> np.ndarray:
    q = _as_quat(q)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_inverse(q) -> np.ndarray:
    q = _as_quat(q)
    n2 = np.sum(q * q, axis=-1, keepdims=True)
    if np.any(n2 < 1e-18):
        raise ValueError("cannot invert a quaternion with near-zero norm")
    return conjugate(q) / n2


def rotation_angle_between(a, b) -> np.ndarray | float:
    """Shortest rotation angle in ``[0, pi]`` taking ``a`` to ``b``.

    Equal to ``2 * arccos(|a . b|)``; evaluated through ``atan2`` of the
    relative rotation so that angles near zero keep full precision.
    """
    a = _as_quat(a)
    b = _as_quat(b)
    _check_unit(a, "a")
    _check_unit(b, "b")
    d = np.abs(np.sum(a * b, axis=-1))
    rel = hamilton_product(b, conjugate(a))
    s = np.linalg.norm(rel[..., 1:], axis=-1)
    gamma = 2.0 * np.arctan2(s, d)
    return float(gamma) if np.ndim(gamma) == 0 else gamma


def rotation_angle_grad(a, b):
    """Angle between unit quaternions and its gradient w.r.t. both inputs.

    The gradients are tangent to the unit sphere at ``a`` and ``b``; any
    component along ``a`` (resp. ``b``) is irrelevant for unit-constrained
    inputs and is dropped.  At coincident rotations the zero subgradient is
    returned.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dot = np.sum(a * b, axis=-1, keepdims=True)
    sgn = np.where(dot < 0.0, -1.0, 1.0)
    ua = b - dot * a
    ub = a - dot * b
    na = np.linalg.norm(ua, axis=-1, keepdims=True)
    nb = np.linalg.norm(ub, axis=-1, keepdims=True)
    gamma = 2.0 * np.arctan2(na[..., 0], np.abs(dot[..., 0]))
    safe_a = np.where(na > 1e-15, na, 1.0)
    safe_b = np.where(nb > 1e-15, nb, 1.0)
    ga = np.where(na > 1e-15, -2.0 * sgn * ua / safe_a, 0.0)
    gb = np.where(nb > 1e-15, -2.0 * sgn * ub / safe_b, 0.0)
    return gamma, ga, gb


def slerp(q0, q1, t: float) -> np.ndarray:
    """Constant-speed geodesic interpolation from ``q0`` (t=0) to ``q1`` (t=1).

    ``q1`` is sign-flipped onto the hemisphere of ``q0`` first so the shorter
    arc is taken.
    """
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    q0 = _as_quat(q0)
    q1 = _as_quat(q1)
    _check_unit(q0, "q0")
    _check_unit(q1, "q1")
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    dot = min(dot, 1.0)
    eta = np.arccos(dot)
    if np.sin(eta) < 1e-6:
        return normalize((1.0 - t) * q0 + t * q1)
    out = (np.sin((1.0 - t) * eta) * q0 + np.sin(t * eta) * q1) / np.sin(eta)
    return out / np.linalg.norm(out)


def quat_from_rotvec(v) -> np.ndarray:
    """Axis-angle vectors ``(..., 3)`` to unit quaternions ``(..., 4)``."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    small = angle < _SMALL
    safe = np.where(small, 1.0, angle)
    # sin(a/2)/a -> 1/2 - a^2/48 as a -> 0
    k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(0.5 * angle) / safe)
    return np.concatenate([np.cos(0.5 * angle), k * v], axis=-1)


def quat_from_rotvec_jac(v):
    """Quaternions and their Jacobians ``(..., 4, 3)`` w.r.t. the rotation vector."""
    v = np.asarray(v, dtype=float)
    a = np.linalg.norm(v, axis=-1, keepdims=True)
    small = a < 1e-4
    safe = np.where(small, 1.0, a)
    half = 0.5 * a
    sh, ch = np.sin(half), np.cos(half)
    k = np.where(small, 0.5 - a**2 / 48.0, sh / safe)
    # (dk/da)/a
    kp = np.where(small, -1.0 / 24.0 + a**2 / 960.0, ch / (2.0 * safe**2) - sh / safe**3)
    q = np.concatenate([ch, k * v], axis=-1)
    jac = np.zeros(v.shape[:-1] + (4, 3))
    jac[..., 0, :] = -0.5 * k * v
    eye = np.eye(3)
    jac[..., 1:, :] = k[..., None] * eye + kp[..., None] * v[..., :, None] * v[..., None, :]
    return q, jac


def rotvec_from_quat(q) -> np.ndarray:
    """Inverse of :func:`quat_from_rotvec`, choosing the angle in ``[0, pi]``."""
    q = normalize(q)
    q = np.where(q[..., :1] < 0.0, -q, q)
    s = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., :1])
    small = s < 1e-12
    k = np.where(small, 2.0, angle / np.where(small, 1.0, s))
    return k * q[..., 1:]


def quat_to_matrix(q) -> np.ndarray:
    q = normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
            2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
            2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def pose_to_quaternions(theta, rot, n_joints: int = 10) -> np.ndarray:
    """Per-joint quaternions for one frame: global rotation first, then joints.

    ``theta`` holds ``n_joints`` consecutive axis-angle triples in kinematic
    order; ``rot`` is the global axis-angle rotation.  Returns ``(n_joints + 1, 4)``.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    rot = np.asarray(rot, dtype=float).ravel()
    if theta.size != 3 * n_joints:
        raise ValueError(f"theta must have {3 * n_joints} entries, got {theta.size}")
    if rot.size != 3:
        raise ValueError(f"global rotation must have 3 entries, got {rot.size}")
    vecs = np.concatenate([rot[None, :], theta.reshape(n_joints, 3)], axis=0)
    return quat_from_rotvec(vecs)
