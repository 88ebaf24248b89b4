"""Small rigid-body helpers shared by the kinematics and collision code."""

import numpy as np


def skew(v):
    """Cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_matrices(axis, angles):
    """Rodrigues rotation about a fixed unit ``axis`` for a batch of angles.

    Parameters
    ----------
    axis : array-like of shape (3,)
    angles : ndarray of shape (B,)

    Returns
    -------
    ndarray of shape (B, 3, 3)
    """
    K = skew(np.asarray(axis, dtype=float))
    K2 = K @ K
    s = np.sin(angles)[:, None, None]
    c = np.cos(angles)[:, None, None]
    return np.eye(3) + s * K + (1.0 - c) * K2


def segment_distances(p0, p1, q0, q1):
    """Closest distance between segment pairs ``[p0, p1]`` and ``[q0, q1]``.

    All arguments have shape (..., 3); the result has shape (...). Handles
    degenerate (zero-length) and parallel segments.
    """
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.einsum("...i,...i->...", d1, d1)
    e = np.einsum("...i,...i->...", d2, d2)
    f = np.einsum("...i,...i->...", d2, r)
    c = np.einsum("...i,...i->...", d1, r)
    b = np.einsum("...i,...i->...", d1, d2)
    eps = 1e-18

    denom = a * e - b * b
    ok = denom > 1e-12 * a * e + eps
    safe_denom = np.where(ok, denom, 1.0)
    s = np.where(ok, np.clip((b * f - c * e) / safe_denom, 0.0, 1.0), 0.0)
    safe_e = np.where(e > eps, e, 1.0)
    t = np.where(e > eps, (b * s + f) / safe_e, 0.0)

    # t outside [0, 1]: clamp it and recompute s for the clamped t
    safe_a = np.where(a > eps, a, 1.0)
    s_lo = np.where(a > eps, np.clip(-c / safe_a, 0.0, 1.0), 0.0)
    s_hi = np.where(a > eps, np.clip((b - c) / safe_a, 0.0, 1.0), 0.0)
    s = np.where(t < 0.0, s_lo, np.where(t > 1.0, s_hi, s))
    s = np.where(e > eps, s, s_lo)
    t = np.clip(t, 0.0, 1.0)

    diff = (p0 + s[..., None] * d1) - (q0 + t[..., None] * d2)
    return np.sqrt(np.einsum("...i,...i->...", diff, diff))
