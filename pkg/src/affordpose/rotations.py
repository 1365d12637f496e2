"""Axis-angle helpers shared by the kinematics and guidance code."""

import numpy as np

_SMALL = 1e-8


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(aa):
    """Rotation matrix for an axis-angle 3-vector."""
    aa = np.asarray(aa, dtype=np.float64)
    phi2 = float(aa @ aa)
    K = skew(aa)
    if phi2 < _SMALL:
        a = 1.0 - phi2 / 6.0
        b = 0.5 - phi2 / 24.0
    else:
        phi = np.sqrt(phi2)
        a = np.sin(phi) / phi
        b = (1.0 - np.cos(phi)) / phi2
    return np.eye(3) + a * K + b * (K @ K)


def left_jacobian(aa):
    """SO(3) left Jacobian: d exp([aa]x) / d aa_c = [J e_c]x exp([aa]x)."""
    aa = np.asarray(aa, dtype=np.float64)
    phi2 = float(aa @ aa)
    K = skew(aa)
    if phi2 < _SMALL:
        b = 0.5 - phi2 / 24.0
        c = 1.0 / 6.0 - phi2 / 120.0
    else:
        phi = np.sqrt(phi2)
        b = (1.0 - np.cos(phi)) / phi2
        c = (phi - np.sin(phi)) / (phi2 * phi)
    return np.eye(3) + b * K + c * (K @ K)


def canonicalize_axis_angle(aa):
    """Wrap axis-angle vectors (..., 3) so every magnitude lies in [0, pi].

    The represented rotation is unchanged.
    """
    aa = np.asarray(aa, dtype=np.float64)
    phi = np.linalg.norm(aa, axis=-1, keepdims=True)
    wrapped = np.mod(phi, 2.0 * np.pi)
    flip = wrapped > np.pi
    new_phi = np.where(flip, 2.0 * np.pi - wrapped, wrapped)
    sign = np.where(flip, -1.0, 1.0)
    safe = np.where(phi > 0, phi, 1.0)
    return np.where(phi > 0, aa / safe * new_phi * sign, 0.0)
