"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from nslm.bilevel import StationarityPoint
from nslm.mnlcs import MnlcsProblem


def ex8_solution(lam: float = 1.0, nu_hat: float = 0.0) -> StationarityPoint:
    """The Example-8 minimizer (9, 3) with mu = 0 and nu = 2 + lam * nu_hat."""
    return StationarityPoint([9.0], [3.0], [0.0], [2.0 + lam * nu_hat], [nu_hat], lam)


def affine_problem(A_H, b_H, A_G, b_G, p1: int, name: str = "affine") -> MnlcsProblem:
    """MNLCS with ``H(z) = A_H z + b_H`` and ``calG(z) = A_G z + b_G``."""
    A_H = np.atleast_2d(np.asarray(A_H, dtype=float))
    A_G = np.asarray(A_G, dtype=float).reshape(-1, A_H.shape[1])
    b_H = np.asarray(b_H, dtype=float)
    b_G = np.asarray(b_G, dtype=float)

    def z_of(w, xi):
        return np.concatenate([w, xi])

    return MnlcsProblem(
        p1=p1,
        p2=A_H.shape[1] - p1,
        q1=A_H.shape[0],
        eval_H=lambda w, xi: A_H @ z_of(w, xi) + b_H,
        jac_H=lambda w, xi: A_H.copy(),
        eval_G=lambda w, xi: A_G @ z_of(w, xi) + b_G,
        jac_G=lambda w, xi: A_G.copy(),
        name=name,
    )


def remainder_ratio(f, dn, z, d) -> float:
    """``||f(z+d) - f(z) - D_N f(z+d) d|| / ||d||^2``."""
    r = np.atleast_1d(f(z + d) - f(z) - np.atleast_2d(dn(z + d)) @ d)
    return float(np.linalg.norm(r)) / float(d @ d)
