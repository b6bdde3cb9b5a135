"""Bilevel problems and their stationarity systems as MNLCS.

The optimistic bilevel problem::

    min_{x,y} F(x,y)  s.t.  G(x,y) <= 0,  y in argmin_y { f(x,y) : g(x,y) <= 0 }

has a stationarity system with multipliers ``mu`` (for G), ``nu``/``nu_hat``
(for g in the upper and lower Lagrangian) and a penalty ``lam >= 0``. It is
cast as an MNLCS in three ways:

* ``para``: ``lam > 0`` is fixed; ``w = (x, y)``, ``xi = (mu, nu, nu_hat)``.
* ``var1``: ``lam`` joins the multipliers, ``xi = (mu, nu, nu_hat, lam)``,
  complementary to the constant 0.
* ``var2``: ``lam = zeta**2`` with ``w = (x, y, zeta)``.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from nslm import compiled as _cmp
from nslm.mnlcs import MnlcsProblem
from nslm.ncp import phi_fb

ScalarFn = Callable[[np.ndarray, np.ndarray], float]
ArrayFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BilevelProblem:
    """Data of a bilevel problem with derivatives in the joint variable ``(x, y)``.

    ``hess_G``/``hess_g`` return stacks of shape ``(s, n+m, n+m)`` and
    ``(t, n+m, n+m)``.
    """

    n: int
    m: int
    s: int
    t: int
    F: ScalarFn
    grad_F: ArrayFn
    hess_F: ArrayFn
    f: ScalarFn
    grad_f: ArrayFn
    hess_f: ArrayFn
    G: ArrayFn
    jac_G: ArrayFn
    hess_G: ArrayFn
    g: ArrayFn
    jac_g: ArrayFn
    hess_g: ArrayFn
    name: str = ""
    default_xy: np.ndarray | None = None
    info: dict = field(default_factory=dict, compare=False)
    #: optional numba kernels mirroring the callbacks (enables the compiled solver)
    kernels: _cmp.BilevelKernels | None = field(default=None, compare=False, repr=False)

    @property
    def nm(self) -> int:
        return self.n + self.m

    def split_xy(self, w):
        w = np.asarray(w, dtype=float)
        return w[: self.n], w[self.n : self.nm]


@dataclass
class StationarityPoint:
    x: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    nu_hat: np.ndarray
    lam: float
    zeta: float | None = None

    def __post_init__(self):
        for name in ("x", "y", "mu", "nu", "nu_hat"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if self.zeta is not None:
            self.lam = float(self.zeta) ** 2
        self.lam = float(self.lam)


SETTINGS = ("para", "var1", "var2")


# -- stationarity residual ---------------------------------------------------


def kkt_residual(bp: BilevelProblem, pt: StationarityPoint) -> np.ndarray:
    """Stacked residual of the stationarity system.

    Blocks: upper Lagrangian gradient (n+m), lower Lagrangian y-gradient (m),
    FB residuals of ``(G, -mu)``, ``(g, -nu)``, ``(g, -nu_hat)`` and ``min(lam, 0)``.
    """
    x, y = pt.x, pt.y
    _check_len(pt.x, bp.n, "x")
    _check_len(pt.y, bp.m, "y")
    _check_len(pt.mu, bp.s, "mu")
    _check_len(pt.nu, bp.t, "nu")
    _check_len(pt.nu_hat, bp.t, "nu_hat")
    JG, Jg = _jac(bp.jac_G(x, y), bp.s, bp.nm), _jac(bp.jac_g(x, y), bp.t, bp.nm)
    G, g = _vec(bp.G(x, y), bp.s), _vec(bp.g(x, y), bp.t)
    upper = bp.grad_F(x, y) + JG.T @ pt.mu + Jg.T @ (pt.nu - pt.lam * pt.nu_hat)
    lower = np.asarray(bp.grad_f(x, y))[bp.n :] + Jg[:, bp.n :].T @ pt.nu_hat
    return np.concatenate(
        [upper, lower, phi_fb(G, -pt.mu), phi_fb(g, -pt.nu), phi_fb(g, -pt.nu_hat), [min(pt.lam, 0.0)]]
    )


def _check_len(v, n, what):
    if v.shape != (n,):
        raise ValueError(f"{what} has shape {v.shape}, expected ({n},)")


def _vec(v, n):
    return np.asarray(v, dtype=float).reshape(n)


def _jac(v, rows, cols):
    return np.asarray(v, dtype=float).reshape(rows, cols)


def _hess_stack(v, k, nm):
    return np.asarray(v, dtype=float).reshape(k, nm, nm)


# -- MNLCS builders ----------------------------------------------------------


def _lagrangian_blocks(bp, x, y, mu, nu, nu_hat, lam):
    """Values and second-order data shared by all three settings."""
    n, nm, t = bp.n, bp.nm, bp.t
    JG = _jac(bp.jac_G(x, y), bp.s, nm)
    Jg = _jac(bp.jac_g(x, y), t, nm)
    wgt = nu - lam * nu_hat
    grad_L = np.asarray(bp.grad_F(x, y), dtype=float) + JG.T @ mu + Jg.T @ wgt
    grad_l_y = np.asarray(bp.grad_f(x, y), dtype=float)[n:] + Jg[:, n:].T @ nu_hat
    return JG, Jg, wgt, grad_L, grad_l_y


def _hessians(bp, x, y, mu, wgt, nu_hat):
    nm = bp.nm
    HL = np.asarray(bp.hess_F(x, y), dtype=float).copy()
    Hl = np.asarray(bp.hess_f(x, y), dtype=float).copy()
    if bp.s and np.any(mu):
        HL += np.tensordot(mu, _hess_stack(bp.hess_G(x, y), bp.s, nm), axes=1)
    if bp.t and (np.any(wgt) or np.any(nu_hat)):
        Hg = _hess_stack(bp.hess_g(x, y), bp.t, nm)
        HL += np.tensordot(wgt, Hg, axes=1)
        Hl += np.tensordot(nu_hat, Hg, axes=1)
    return HL, Hl


def _G_calG(bp, x, y):
    return np.concatenate([_vec(bp.G(x, y), bp.s), np.tile(_vec(bp.g(x, y), bp.t), 2)])


def _jac_calG_w(bp, x, y):
    return np.vstack([_jac(bp.jac_G(x, y), bp.s, bp.nm), np.tile(_jac(bp.jac_g(x, y), bp.t, bp.nm), (2, 1))])


def _compiled(bp: BilevelProblem, setting: str, lam: float = 0.0):
    if bp.kernels is None:
        return None
    return _cmp.CompiledSystem(bp.kernels, _cmp.SETTING_CODES[setting], float(lam), bp.n, bp.m, bp.s, bp.t)


def build_para(bp: BilevelProblem, lam: float) -> MnlcsProblem:
    """MNLCS with fixed ``lam > 0``: ``p1 = n+m``, ``p2 = s+2t``, ``q1 = n+2m``."""
    lam = float(lam)
    if not lam > 0.0:
        raise ValueError(f"lambda must be positive in the parametric setting, got {lam}")
    n, m, s, t, nm = bp.n, bp.m, bp.s, bp.t, bp.nm
    p2 = s + 2 * t

    def unpack(w, xi):
        return w[:n], w[n:nm], xi[:s], xi[s : s + t], xi[s + t : s + 2 * t]

    def eval_H(w, xi):
        x, y, mu, nu, nh = unpack(w, xi)
        _, _, _, gL, gl = _lagrangian_blocks(bp, x, y, mu, nu, nh, lam)
        return np.concatenate([gL, gl])

    def jac_H(w, xi):
        x, y, mu, nu, nh = unpack(w, xi)
        JG, Jg, wgt, _, _ = _lagrangian_blocks(bp, x, y, mu, nu, nh, lam)
        HL, Hl = _hessians(bp, x, y, mu, wgt, nh)
        J = np.zeros((nm + m, nm + p2))
        J[:nm, :nm] = HL
        J[:nm, nm : nm + s] = JG.T
        J[:nm, nm + s : nm + s + t] = Jg.T
        J[:nm, nm + s + t :] = -lam * Jg.T
        J[nm:, :nm] = Hl[n:, :]
        J[nm:, nm + s + t :] = Jg[:, n:].T
        return J

    def eval_G(w, xi):
        return _G_calG(bp, w[:n], w[n:nm])

    def jac_G(w, xi):
        J = np.zeros((p2, nm + p2))
        J[:, :nm] = _jac_calG_w(bp, w[:n], w[n:nm])
        return J

    return MnlcsProblem(
        nm, p2, nm + m, eval_H, jac_H, eval_G, jac_G,
        name=f"{bp.name}-para", meta={"setting": "para", "lambda": lam, "bilevel": bp}, compiled=_compiled(bp, "para", lam),
    )  # fmt: skip


def build_var1(bp: BilevelProblem) -> MnlcsProblem:
    """MNLCS with ``lam`` as the last multiplier, complementary to the constant 0."""
    n, m, s, t, nm = bp.n, bp.m, bp.s, bp.t, bp.nm
    p2 = s + 2 * t + 1

    def unpack(w, xi):
        return w[:n], w[n:nm], xi[:s], xi[s : s + t], xi[s + t : s + 2 * t], xi[-1]

    def eval_H(w, xi):
        x, y, mu, nu, nh, lam = unpack(w, xi)
        _, _, _, gL, gl = _lagrangian_blocks(bp, x, y, mu, nu, nh, lam)
        return np.concatenate([gL, gl])

    def jac_H(w, xi):
        x, y, mu, nu, nh, lam = unpack(w, xi)
        JG, Jg, wgt, _, _ = _lagrangian_blocks(bp, x, y, mu, nu, nh, lam)
        HL, Hl = _hessians(bp, x, y, mu, wgt, nh)
        J = np.zeros((nm + m, nm + p2))
        J[:nm, :nm] = HL
        J[:nm, nm : nm + s] = JG.T
        J[:nm, nm + s : nm + s + t] = Jg.T
        J[:nm, nm + s + t : nm + s + 2 * t] = -lam * Jg.T
        J[:nm, -1] = -(Jg.T @ nh)
        J[nm:, :nm] = Hl[n:, :]
        J[nm:, nm + s + t : nm + s + 2 * t] = Jg[:, n:].T
        return J

    def eval_G(w, xi):
        return np.concatenate([_G_calG(bp, w[:n], w[n:nm]), [0.0]])

    def jac_G(w, xi):
        J = np.zeros((p2, nm + p2))
        J[:-1, :nm] = _jac_calG_w(bp, w[:n], w[n:nm])
        return J

    return MnlcsProblem(
        nm, p2, nm + m, eval_H, jac_H, eval_G, jac_G,
        name=f"{bp.name}-var1", meta={"setting": "var1", "bilevel": bp}, compiled=_compiled(bp, "var1"),
    )  # fmt: skip


def build_var2(bp: BilevelProblem) -> MnlcsProblem:
    """MNLCS with ``lam = zeta**2`` and ``w = (x, y, zeta)``; no equation for ``zeta``."""
    n, m, s, t, nm = bp.n, bp.m, bp.s, bp.t, bp.nm
    p1, p2 = nm + 1, s + 2 * t

    def unpack(w, xi):
        return w[:n], w[n:nm], w[nm], xi[:s], xi[s : s + t], xi[s + t :]

    def eval_H(w, xi):
        x, y, zeta, mu, nu, nh = unpack(w, xi)
        _, _, _, gL, gl = _lagrangian_blocks(bp, x, y, mu, nu, nh, zeta * zeta)
        return np.concatenate([gL, gl])

    def jac_H(w, xi):
        x, y, zeta, mu, nu, nh = unpack(w, xi)
        lam = zeta * zeta
        JG, Jg, wgt, _, _ = _lagrangian_blocks(bp, x, y, mu, nu, nh, lam)
        HL, Hl = _hessians(bp, x, y, mu, wgt, nh)
        J = np.zeros((nm + m, p1 + p2))
        J[:nm, :nm] = HL
        J[:nm, nm] = -2.0 * zeta * (Jg.T @ nh)
        J[:nm, p1 : p1 + s] = JG.T
        J[:nm, p1 + s : p1 + s + t] = Jg.T
        J[:nm, p1 + s + t :] = -lam * Jg.T
        J[nm:, :nm] = Hl[n:, :]
        J[nm:, p1 + s + t :] = Jg[:, n:].T
        return J

    def eval_G(w, xi):
        return _G_calG(bp, w[:n], w[n:nm])

    def jac_G(w, xi):
        J = np.zeros((p2, p1 + p2))
        J[:, :nm] = _jac_calG_w(bp, w[:n], w[n:nm])
        return J

    return MnlcsProblem(
        p1, p2, nm + m, eval_H, jac_H, eval_G, jac_G,
        name=f"{bp.name}-var2", meta={"setting": "var2", "bilevel": bp}, compiled=_compiled(bp, "var2"),
    )  # fmt: skip


def build(bp: BilevelProblem, setting: str, lam: float = 1.0) -> MnlcsProblem:
    setting = setting.lower()
    if setting == "para":
        return build_para(bp, lam)
    if setting == "var1":
        return build_var1(bp)
    if setting == "var2":
        return build_var2(bp)
    raise ValueError(f"unknown setting {setting!r}; expected one of {SETTINGS}")


def to_iterate(bp: BilevelProblem, setting: str, pt: StationarityPoint) -> np.ndarray:
    """Flatten a stationarity point into the iterate of the given setting."""
    setting = setting.lower()
    w = np.concatenate([pt.x, pt.y])
    xi = np.concatenate([pt.mu, pt.nu, pt.nu_hat])
    if setting == "para":
        return np.concatenate([w, xi])
    if setting == "var1":
        return np.concatenate([w, xi, [pt.lam]])
    if setting == "var2":
        zeta = pt.zeta if pt.zeta is not None else float(np.sqrt(max(pt.lam, 0.0)))
        return np.concatenate([w, [zeta], xi])
    raise ValueError(f"unknown setting {setting!r}")


def from_iterate(bp: BilevelProblem, setting: str, z, lam: float = 1.0) -> StationarityPoint:
    """Inverse of :func:`to_iterate`; ``lam`` is only used for ``para``."""
    z = np.asarray(z, dtype=float)
    n, nm, s, t = bp.n, bp.nm, bp.s, bp.t
    x, y = z[:n], z[n:nm]
    setting = setting.lower()
    if setting == "var2":
        zeta = z[nm]
        xi = z[nm + 1 :]
        return StationarityPoint(x, y, xi[:s], xi[s : s + t], xi[s + t :], zeta * zeta, zeta=zeta)
    xi = z[nm:]
    if setting == "var1":
        lam = xi[-1]
    return StationarityPoint(x, y, xi[:s], xi[s : s + t], xi[s + t : s + 2 * t], lam)


def upper_objective(bp: BilevelProblem, z) -> float:
    x, y = bp.split_xy(np.asarray(z, dtype=float)[: bp.nm])
    return float(bp.F(x, y))


# -- built-in problems -------------------------------------------------------


def make_example8() -> BilevelProblem:
    """``min (x-8)^2 + (y-9)^2  s.t.  x >= 0,  y in argmin {(y-3)^2 : y^2 <= x}``.

    Global minimizer ``(9, 3)`` with upper objective 37.
    """
    z2 = np.zeros((2, 2))
    return BilevelProblem(
        n=1,
        m=1,
        s=1,
        t=1,
        F=lambda x, y: float((x[0] - 8.0) ** 2 + (y[0] - 9.0) ** 2),
        grad_F=lambda x, y: np.array([2.0 * (x[0] - 8.0), 2.0 * (y[0] - 9.0)]),
        hess_F=lambda x, y: np.diag([2.0, 2.0]),
        f=lambda x, y: float((y[0] - 3.0) ** 2),
        grad_f=lambda x, y: np.array([0.0, 2.0 * (y[0] - 3.0)]),
        hess_f=lambda x, y: np.diag([0.0, 2.0]),
        G=lambda x, y: np.array([-x[0]]),
        jac_G=lambda x, y: np.array([[-1.0, 0.0]]),
        hess_G=lambda x, y: z2[None, :, :],
        g=lambda x, y: np.array([y[0] ** 2 - x[0]]),
        jac_g=lambda x, y: np.array([[-1.0, 2.0 * y[0]]]),
        hess_g=lambda x, y: np.diag([0.0, 2.0])[None, :, :],
        name="example8",
        default_xy=np.array([5.0, 0.0]),
        info={"best_known": 37.0, "solution_xy": np.array([9.0, 3.0])},
        kernels=_cmp.example8_kernels(),
    )


TRANSPORT_N = 5
TRANSPORT_L = 7


def optimal_plan(c: np.ndarray, supply: np.ndarray, demand: np.ndarray) -> np.ndarray:
    """A minimum-cost plan of the transportation LP (HiGHS, deterministic)."""
    from scipy.optimize import linprog

    n, L = c.shape
    A_sup = np.kron(np.eye(n), np.ones((1, L)))
    A_dem = -np.kron(np.ones((1, n)), np.eye(L))
    res = linprog(
        c.ravel(), A_ub=np.vstack([A_sup, A_dem]), b_ub=np.concatenate([supply, -demand]),
        bounds=(0, None), method="highs",
    )  # fmt: skip
    if res.status != 0:
        raise ValueError(f"transportation LP not solvable: {res.message}")
    return res.x.reshape(n, L)


def transport_data(seed: int, noise: float = 0.01, plan: str = "feasible"):
    """Synthetic data ``(c, b_dem, y_obs)`` for the inverse transportation problem.

    Streams: the generator is ``PCG64(SeedSequence(seed))``; costs are drawn
    first, then demands, then the plan, then the observation noise.

    ``plan="feasible"`` (default) splits each demand across the warehouses with
    Dirichlet shares, so ``y_obs`` is a feasible but generally not cost-optimal
    plan. ``plan="optimal"`` instead draws supplies with 20% total slack and
    solves the transportation LP, so ``y_obs`` lies close to a lower-level
    solution.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    c = rng.uniform(0.0, 1.0, size=(TRANSPORT_N, TRANSPORT_L))
    b = rng.integers(1, 10, size=TRANSPORT_L).astype(float)
    if plan == "feasible":
        shares = rng.dirichlet(np.ones(TRANSPORT_N), size=TRANSPORT_L).T
        y = shares * b[None, :]
    elif plan == "optimal":
        x_true = rng.uniform(0.5, 1.5, size=TRANSPORT_N)
        x_true *= 1.2 * b.sum() / x_true.sum()
        y = optimal_plan(c, x_true, b)
    else:
        raise ValueError(f"unknown plan kind {plan!r}")
    y_obs = y + noise * rng.standard_normal(y.shape)
    return c, b, y_obs


def make_transportation(seed: int = 0, noise: float = 0.01, observed: np.ndarray | None = None, plan: str = "feasible") -> BilevelProblem:
    """Inverse transportation problem with ``n = 5`` warehouses and 7 consumers.

    Upper level: ``min 0.5 ||y - y_obs||^2`` s.t. ``x >= 0``, ``sum(x) >= sum(b)``.
    Lower level: ``min <c, y>`` s.t. supply rows ``sum_j y_ij <= x_i``, demand
    rows ``sum_i y_ij >= b_j``, ``y >= 0``. Flows are stored row-major
    (``y[i*7 + j]``). ``observed`` replaces the generated observation.
    """
    n, L = TRANSPORT_N, TRANSPORT_L
    m = n * L
    c, b, y_obs = transport_data(seed, noise, plan)
    if observed is not None:
        y_obs = np.asarray(observed, dtype=float).reshape(n, L)
    yo = y_obs.ravel()
    cv = c.ravel()
    nm = n + m

    supply = np.zeros((n, nm))
    for i in range(n):
        supply[i, i] = -1.0
        supply[i, n + i * L : n + (i + 1) * L] = 1.0
    demand = np.zeros((L, nm))
    for j in range(L):
        demand[j, n + j : nm : L] = -1.0
    nonneg = np.zeros((m, nm))
    nonneg[:, n:] = -np.eye(m)
    Ag = np.vstack([supply, demand, nonneg])
    cg = np.concatenate([np.zeros(n), b, np.zeros(m)])
    AG = np.vstack([np.hstack([-np.eye(n), np.zeros((n, m))]), np.concatenate([-np.ones(n), np.zeros(m)])])
    cG = np.concatenate([np.zeros(n), [b.sum()]])
    t, s = Ag.shape[0], AG.shape[0]
    HF = np.zeros((nm, nm))
    HF[n:, n:] = np.eye(m)
    gf = np.concatenate([np.zeros(n), cv])

    def xy(x, y):
        return np.concatenate([np.asarray(x, dtype=float), np.asarray(y, dtype=float)])

    return BilevelProblem(
        n=n,
        m=m,
        s=s,
        t=t,
        F=lambda x, y: float(0.5 * np.sum((np.asarray(y) - yo) ** 2)),
        grad_F=lambda x, y: np.concatenate([np.zeros(n), np.asarray(y, dtype=float) - yo]),
        hess_F=lambda x, y: HF,
        f=lambda x, y: float(cv @ np.asarray(y, dtype=float)),
        grad_f=lambda x, y: gf,
        hess_f=lambda x, y: np.zeros((nm, nm)),
        G=lambda x, y: AG @ xy(x, y) + cG,
        jac_G=lambda x, y: AG,
        hess_G=lambda x, y: np.zeros((s, nm, nm)),
        g=lambda x, y: Ag @ xy(x, y) + cg,
        jac_g=lambda x, y: Ag,
        hess_g=lambda x, y: np.zeros((t, nm, nm)),
        name="transport",
        default_xy=np.concatenate([np.full(n, 5.0), np.full(m, 1.0)]),
        info={"seed": int(seed), "plan": plan, "cost": c, "demand": b, "observed": y_obs},
        kernels=_cmp.transport_kernels(AG, cG, Ag, cg, HF, yo, gf),
    )


REGISTRY: dict[str, Callable[..., BilevelProblem]] = {
    "example8": make_example8,
    "transport": make_transportation,
}


def get_problem(name: str, seed: int = 0) -> BilevelProblem:
    if name not in REGISTRY:
        raise KeyError(f"unknown problem {name!r}; known: {sorted(REGISTRY)}")
    if name == "transport":
        return make_transportation(seed)
    return REGISTRY[name]()
