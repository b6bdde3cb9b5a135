"""Scalar NCP functions and their Newton-derivatives.

Both NCP functions vanish exactly on the complementarity set
``{a <= 0, b <= 0, a*b = 0}``. The functions here accept scalars or
equally-shaped numpy arrays (componentwise evaluation) unless noted.
"""

from __future__ import annotations

import math

import numpy as np

#: Value used for both partial derivatives of the FB function at the origin.
FB_ORIGIN_SLOPE = 1.0 + math.sqrt(2.0) / 2.0


def phi_max(a, b):
    return np.maximum(a, b)


def phi_fb(a, b):
    """Fischer-Burmeister function ``a + b + sqrt(a^2 + b^2)``.

    The root is computed with ``hypot`` so that arguments up to ~1e150 do not
    overflow.
    """
    return a + b + np.hypot(a, b)


def dn_max(a: float, b: float) -> np.ndarray:
    """Newton-derivative of ``max`` on R^2; the tie ``a == b`` picks ``(1, 0)``."""
    if a >= b:
        return np.array([1.0, 0.0])
    return np.array([0.0, 1.0])


def dn_norm(z) -> np.ndarray:
    """Newton-derivative of the Euclidean norm.

    Returns ``z / ||z||`` away from the origin and ``(1, ..., 1) / sqrt(p)`` at
    ``z = 0``. The result always has unit length.
    """
    z = np.asarray(z, dtype=float).ravel()
    if z.size == 0:
        raise ValueError("dn_norm needs a vector of dimension >= 1")
    nrm = np.linalg.norm(z)
    if nrm == 0.0:
        return np.full(z.size, math.sqrt(z.size) / z.size)
    return z / nrm


def fb_partials(a, b):
    """Componentwise Newton-derivative of the FB function.

    Returns the pair ``(d/da, d/db)``; each is ``1 + a/r`` resp. ``1 + b/r``
    with ``r = hypot(a, b)``, and ``1 + sqrt(2)/2`` wherever ``a = b = 0``
    exactly.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    r = np.hypot(a, b)
    origin = (a * a + b * b) == 0.0
    safe_r = np.where(origin, 1.0, r)
    da = np.where(origin, FB_ORIGIN_SLOPE, 1.0 + a / safe_r)
    db = np.where(origin, FB_ORIGIN_SLOPE, 1.0 + b / safe_r)
    return da, db


def dn_phi_fb(a: float, b: float) -> np.ndarray:
    """Newton-derivative of the FB function at a single pair ``(a, b)``."""
    da, db = fb_partials(a, b)
    return np.array([float(da), float(db)])
