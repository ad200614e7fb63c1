"""SO(3) utilities: exponential/log maps, Jacobians, quaternion conversion.

Conventions: rotation matrices are world_from_body style (R @ v_body = v_world),
perturbations are applied on the right, R <- R @ exp(hat(delta)).
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-10


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(a) @ b = a x b."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def exp_so3(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula; series expansion below the small-angle threshold."""
    theta2 = float(phi @ phi)
    k = hat(phi)
    if theta2 < _EPS**2:
        return np.eye(3) + k + 0.5 * (k @ k)
    theta = np.sqrt(theta2)
    return np.eye(3) + (np.sin(theta) / theta) * k + ((1.0 - np.cos(theta)) / theta2) * (k @ k)


def log_so3(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix; stable near 0 and pi."""
    trace = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(trace)
    if theta < _EPS:
        return vee(rot - rot.T) * 0.5
    if np.pi - theta < 1e-6:
        # Near pi the axis comes from the symmetric part.
        m = (rot + np.eye(3)) * 0.5
        axis = np.sqrt(np.maximum(np.diagonal(m), 0.0))
        k = int(np.argmax(axis))
        axis = m[:, k] / max(axis[k], _EPS)
        axis = axis / np.linalg.norm(axis)
        # Fix sign using the skew part.
        w = vee(rot - rot.T)
        if w @ axis < 0.0:
            axis = -axis
        return axis * theta
    return vee(rot - rot.T) * (0.5 * theta / np.sin(theta))


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """J_r with exp(phi + d) ~ exp(phi) exp(J_r d)."""
    theta2 = float(phi @ phi)
    k = hat(phi)
    if theta2 < _EPS**2:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    theta = np.sqrt(theta2)
    return (
        np.eye(3)
        - ((1.0 - np.cos(theta)) / theta2) * k
        + ((theta - np.sin(theta)) / (theta2 * theta)) * (k @ k)
    )


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta2 = float(phi @ phi)
    k = hat(phi)
    if theta2 < _EPS**2:
        return np.eye(3) + 0.5 * k + (k @ k) / 12.0
    theta = np.sqrt(theta2)
    coeff = 1.0 / theta2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * k + coeff * (k @ k)


def left_jacobian(phi: np.ndarray) -> np.ndarray:
    """J_l(phi) = integral_0^1 exp(s*phi) ds = J_r(-phi)."""
    return right_jacobian(-phi)


def double_integral(phi: np.ndarray) -> np.ndarray:
    """integral_0^1 integral_0^u exp(s*phi) ds du.

    Used for exact zero-order-hold integration of position over one IMU
    sample interval (phi = omega * dt).
    """
    theta2 = float(phi @ phi)
    k = hat(phi)
    if theta2 < _EPS**2:
        return 0.5 * np.eye(3) + k / 6.0 + (k @ k) / 24.0
    theta = np.sqrt(theta2)
    c1 = (theta - np.sin(theta)) / (theta2 * theta)
    c2 = (0.5 * theta2 - 1.0 + np.cos(theta)) / (theta2 * theta2)
    return 0.5 * np.eye(3) + c1 * k + c2 * (k @ k)


def quat_from_rot(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix (Shepperd's method)."""
    t = np.trace(rot)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([
            0.25 * s,
            (rot[2, 1] - rot[1, 2]) / s,
            (rot[0, 2] - rot[2, 0]) / s,
            (rot[1, 0] - rot[0, 1]) / s,
        ])
    else:
        i = int(np.argmax(np.diagonal(rot)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(rot[i, i] - rot[j, j] - rot[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (rot[k, j] - rot[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (rot[j, i] + rot[i, j]) / s
        q[1 + k] = (rot[k, i] + rot[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def rot_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
