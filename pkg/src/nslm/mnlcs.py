"""Mixed nonlinear complementarity systems (MNLCS).

A system is given by callbacks ``H`` and ``G`` in the variables ``(w, xi)``
and reads::

    H(w, xi) = 0,   G(w, xi) <= 0,   xi >= 0,   G(w, xi)^T xi = 0.

Iterates are flat numpy vectors ``z = [w; xi]`` of length ``p1 + p2``. The
complementarity pairs are ``(G_i, -xi_i)``, which turns the system into a root
problem for the max residual or the Fischer-Burmeister (FB) residual.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from nslm.ncp import fb_partials, phi_fb

Callback = Callable[[np.ndarray, np.ndarray], np.ndarray]


class ShapeError(ValueError):
    """A callback returned an array of the wrong shape."""


class NonFiniteError(FloatingPointError):
    """A callback produced NaN or Inf."""


@dataclass(frozen=True)
class MnlcsProblem:
    """Callbacks and dimensions of one MNLCS instance.

    ``jac_H`` and ``jac_G`` return dense matrices with respect to the full
    variable ``z = [w; xi]``, i.e. with ``p1 + p2`` columns.
    """

    p1: int
    p2: int
    q1: int
    eval_H: Callback
    jac_H: Callback
    eval_G: Callback
    jac_G: Callback
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False)
    #: optional compiled twin of the callbacks (see ``nslm.compiled``)
    compiled: object | None = field(default=None, compare=False, repr=False)

    @property
    def n_vars(self) -> int:
        return self.p1 + self.p2

    @property
    def n_rows(self) -> int:
        return self.q1 + self.p2

    def split(self, z) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_vars,):
            raise ShapeError(f"iterate has shape {z.shape}, expected ({self.n_vars},)")
        return z[: self.p1], z[self.p1 :]

    def join(self, w, xi) -> np.ndarray:
        z = np.concatenate([np.asarray(w, dtype=float).ravel(), np.asarray(xi, dtype=float).ravel()])
        if z.shape != (self.n_vars,):
            raise ShapeError(f"(w, xi) has {z.size} entries, expected {self.n_vars}")
        return z


@dataclass(frozen=True)
class ComplIndexSets:
    """Index sets of the complementarity pairs (0-based indices)."""

    i0: frozenset[int]
    i_minus: frozenset[int]
    i_plus: frozenset[int]
    i00: frozenset[int]
    i_ge: frozenset[int]
    i_lt: frozenset[int]


class Evaluation(NamedTuple):
    H: np.ndarray
    G: np.ndarray
    xi: np.ndarray
    JH: np.ndarray | None
    JG: np.ndarray | None


def _checked(arr, shape, what):
    arr = np.asarray(arr, dtype=float)
    if arr.shape != shape:
        if arr.size == int(np.prod(shape)) and arr.ndim <= 1 and len(shape) == 1:
            arr = arr.reshape(shape)
        else:
            raise ShapeError(f"{what} returned shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} returned non-finite entries")
    return arr


def evaluate(prob: MnlcsProblem, z, jacobians: bool = True) -> Evaluation:
    """Evaluate all callbacks once at ``z`` with shape and finiteness checks."""
    w, xi = prob.split(z)
    H = _checked(prob.eval_H(w, xi), (prob.q1,), "eval_H")
    G = _checked(prob.eval_G(w, xi), (prob.p2,), "eval_G")
    JH = JG = None
    if jacobians:
        JH = _checked(prob.jac_H(w, xi), (prob.q1, prob.n_vars), "jac_H")
        JG = _checked(prob.jac_G(w, xi), (prob.p2, prob.n_vars), "jac_G")
    return Evaluation(H, G, xi, JH, JG)


# -- assembly from a cached evaluation -------------------------------------


def fmax_from(ev: Evaluation) -> np.ndarray:
    return np.concatenate([ev.H, np.maximum(ev.G, -ev.xi)])


def ffb_from(ev: Evaluation) -> np.ndarray:
    return np.concatenate([ev.H, phi_fb(ev.G, -ev.xi)])


def fb_vectors(G: np.ndarray, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal weights ``(v_a, v_b)`` of the FB Newton-derivative.

    ``v_a = 1 + G/r`` and ``v_b = 1 - xi/r`` with ``r = sqrt(G^2 + xi^2)``;
    both equal ``1 + sqrt(2)/2`` where ``G_i = xi_i = 0``.
    """
    return fb_partials(G, -xi)


def dn_fmax_from(ev: Evaluation, p1: int) -> np.ndarray:
    ge = ev.G >= -ev.xi
    bottom = np.where(ge[:, None], ev.JG, 0.0)
    lt = np.flatnonzero(~ge)
    bottom[lt, p1 + lt] -= 1.0
    return np.vstack([ev.JH, bottom])


def dn_ffb_from(ev: Evaluation, p1: int) -> np.ndarray:
    va, vb = fb_vectors(ev.G, ev.xi)
    bottom = va[:, None] * ev.JG
    idx = np.arange(ev.G.size)
    bottom[idx, p1 + idx] -= vb
    return np.vstack([ev.JH, bottom])


# -- public surface ---------------------------------------------------------


def index_sets(prob: MnlcsProblem, z, act_tol: float = 0.0) -> ComplIndexSets:
    """Classify the complementarity pairs at ``z``.

    ``act_tol`` only affects ``i0/i_minus/i_plus/i00``: a pair counts as active
    when ``G_i >= -act_tol`` and its multiplier as positive when
    ``xi_i > act_tol``. At infeasible points (``G_i > act_tol``) the pair is
    filed under ``i0`` so the partition stays complete. ``i_ge/i_lt`` always use
    the exact comparison ``G_i >= -xi_i``.
    """
    if act_tol < 0:
        raise ValueError("act_tol must be non-negative")
    ev = evaluate(prob, z, jacobians=False)
    G, xi = ev.G, ev.xi
    if act_tol == 0.0:
        active = G >= 0.0
        positive = xi > 0.0
    else:
        active = G >= -act_tol
        positive = xi > act_tol
    ge = G >= -xi

    def s(mask):
        return frozenset(int(i) for i in np.flatnonzero(mask))

    return ComplIndexSets(
        i0=s(active),
        i_minus=s(~active),
        i_plus=s(active & positive),
        i00=s(active & ~positive),
        i_ge=s(ge),
        i_lt=s(~ge),
    )


def residual_max(prob: MnlcsProblem, z) -> np.ndarray:
    """``[H; max(G, -xi)]``."""
    return fmax_from(evaluate(prob, z, jacobians=False))


def residual_fb(prob: MnlcsProblem, z) -> np.ndarray:
    """``[H; phi_FB(G, -xi)]``."""
    return ffb_from(evaluate(prob, z, jacobians=False))


def psi_fb(prob: MnlcsProblem, z) -> float:
    r = residual_fb(prob, z)
    return 0.5 * float(r @ r)


def dn_f_max(prob: MnlcsProblem, z) -> np.ndarray:
    """Newton-derivative of the max residual.

    Rows with ``G_i >= -xi_i`` copy the Jacobian of ``G_i``; the others are
    ``-e^T`` selecting ``xi_i``.
    """
    return dn_fmax_from(evaluate(prob, z), prob.p1)


def dn_f_fb(prob: MnlcsProblem, z) -> np.ndarray:
    """Newton-derivative of the FB residual: bottom block ``diag(v_a) G' - [0 | diag(v_b)]``."""
    return dn_ffb_from(evaluate(prob, z), prob.p1)


def grad_psi_fb(prob: MnlcsProblem, z) -> np.ndarray:
    """Gradient of ``0.5 * ||F_FB||^2``, assembled as ``D_N F_FB(z)^T F_FB(z)``."""
    ev = evaluate(prob, z)
    return dn_ffb_from(ev, prob.p1).T @ ffb_from(ev)


# -- derivative validation -------------------------------------------------


@dataclass
class PointCheck:
    index: int
    max_rel_error: float
    worst_entry: tuple[str, int, int] | None
    passed: bool
    note: str = ""


@dataclass
class DerivativeReport:
    points: list[PointCheck]
    tol: float

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.points)


def central_difference_jacobian(fun: Callable[[np.ndarray], np.ndarray], z: np.ndarray, step: float = 1e-6) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    cols = []
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = step
        cols.append((np.asarray(fun(z + e), dtype=float) - np.asarray(fun(z - e), dtype=float)) / (2 * step))
    return np.column_stack(cols) if cols else np.zeros((0, 0))


def validate_derivatives(
    prob: MnlcsProblem,
    points: Sequence,
    step: float = 1e-6,
    tol: float = 1e-5,
) -> DerivativeReport:
    """Compare ``jac_H``/``jac_G`` against central differences at each point.

    The relative error of an entry is ``|analytic - fd| / max(1, |fd|)``.
    Non-finite output is reported as a failed point, never raised.
    """
    checks = []
    for k, z in enumerate(points):
        z = np.asarray(z, dtype=float)
        try:
            w, xi = prob.split(z)
            JH = np.asarray(prob.jac_H(w, xi), dtype=float)
            JG = np.asarray(prob.jac_G(w, xi), dtype=float)
            fdH = central_difference_jacobian(lambda zz: prob.eval_H(*prob.split(zz)), z, step)
            fdG = central_difference_jacobian(lambda zz: prob.eval_G(*prob.split(zz)), z, step)
        except (ShapeError, ValueError) as exc:
            checks.append(PointCheck(k, np.inf, None, False, f"evaluation failed: {exc}"))
            continue
        worst, where = 0.0, None
        note = ""
        for label, A, B in (("jac_H", JH, fdH.reshape(JH.shape)), ("jac_G", JG, fdG.reshape(JG.shape))):
            if A.size == 0:
                continue
            if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
                worst, note = np.inf, f"non-finite entries in {label}"
                bad = np.argwhere(~(np.isfinite(A) & np.isfinite(B)))[0]
                where = (label, int(bad[0]), int(bad[1]))
                break
            err = np.abs(A - B) / np.maximum(1.0, np.abs(B))
            i, j = np.unravel_index(np.argmax(err), err.shape)
            if err[i, j] > worst:
                worst, where = float(err[i, j]), (label, int(i), int(j))
        checks.append(PointCheck(k, worst, where, worst <= tol, note))
    return DerivativeReport(checks, tol)


# -- built-in instance -------------------------------------------------------


def scalar_lcs() -> MnlcsProblem:
    """The scalar linear system ``w + xi = 0``, ``-w <= 0``, ``xi >= 0``, ``-w * xi = 0``.

    Its only solution is the biactive origin, where the max-residual regularity
    condition holds but the FB condition does not.
    """
    J_H = np.array([[1.0, 1.0]])
    J_G = np.array([[-1.0, 0.0]])
    return MnlcsProblem(
        p1=1,
        p2=1,
        q1=1,
        eval_H=lambda w, xi: np.array([w[0] + xi[0]]),
        jac_H=lambda w, xi: J_H.copy(),
        eval_G=lambda w, xi: np.array([-w[0]]),
        jac_G=lambda w, xi: J_G.copy(),
        name="scalar_lcs",
    )
