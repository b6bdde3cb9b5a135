"""Compiled evaluation of bilevel stationarity systems and of the global LM loop.

The pure-Python solver works for any :class:`~nslm.mnlcs.MnlcsProblem`, but
its per-iteration overhead dominates on the small systems of the benchmark,
where single runs can need 10^5 iterations. Bilevel problems that ship numba
kernels get MNLCS instances carrying a :class:`CompiledSystem`; for those the
solver runs the same algorithm inside one jitted function.

Problem kernels have the signatures::

    first(v, data, full, G, g, JG, Jg, gF, gf)  # values and first derivatives at v = (x, y)
    second(v, data, mu, wgt, nu_hat, HL, Hl)  # Lagrangian Hessians
    upper(v, data) -> float                   # upper-level objective

with ``HL = F'' + sum mu_i G_i'' + sum wgt_i g_i''`` and
``Hl = f'' + sum nu_hat_i g_i''``. ``data`` is a tuple of arrays. With
``full=False`` (merit evaluations between Jacobian updates) ``first`` may skip
rewriting Jacobian entries that do not depend on ``v``; every ``full=False``
call is preceded by a ``full=True`` call on the same buffers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

PARA, VAR1, VAR2 = 0, 1, 2
SETTING_CODES = {"para": PARA, "var1": VAR1, "var2": VAR2}

# status codes returned by the LM kernel
OK = 0
NONFINITE = 1
FACTOR_FAIL = 2
STEP_VANISHED = 3
ARMIJO_CAP = 4
MERIT_INCREASE = 5

STEP_FULL, STEP_DAMPED, STEP_GRADIENT = 0, 1, 2


@dataclass(frozen=True)
class BilevelKernels:
    first: object
    second: object
    upper: object
    data: tuple


@dataclass(frozen=True)
class CompiledSystem:
    kernels: BilevelKernels
    setting: int
    lam: float
    n: int
    m: int
    s: int
    t: int

    @property
    def dims(self):
        nm = self.n + self.m
        p1 = nm + (1 if self.setting == VAR2 else 0)
        p2 = self.s + 2 * self.t + (1 if self.setting == VAR1 else 0)
        return p1, p2, nm + self.m


# -- assembly ------------------------------------------------------------------


class _Work:
    """Scratch arrays for one system (allocated once per solve)."""

    def __init__(self, sysc: CompiledSystem):
        n, m, s, t = sysc.n, sysc.m, sysc.s, sysc.t
        nm = n + m
        p1, p2, q1 = sysc.dims
        self.arrays = (
            np.zeros(s),
            np.zeros(t),
            np.zeros((s, nm)),
            np.zeros((t, nm)),
            np.zeros(nm),
            np.zeros(nm),
            np.zeros((nm, nm)),
            np.zeros((nm, nm)),
        )


@njit(cache=False)
def _lam_of(z, setting, lam_fixed, nm, p1, s, t):
    if setting == VAR1:
        return z[p1 + s + 2 * t]
    if setting == VAR2:
        return z[nm] * z[nm]
    return lam_fixed


@njit(cache=False)
def _values(first, data, setting, lam_fixed, n, m, s, t, z, G, g, JG, Jg, gF, gf, H, calG, full):
    nm = n + m
    p1 = nm + 1 if setting == VAR2 else nm
    first(z[:nm], data, full, G, g, JG, Jg, gF, gf)
    lam = _lam_of(z, setting, lam_fixed, nm, p1, s, t)
    mu = z[p1 : p1 + s]
    nu = z[p1 + s : p1 + s + t]
    nh = z[p1 + s + t : p1 + s + 2 * t]
    # row-wise accumulation keeps the inner loops contiguous
    for j in range(nm):
        H[j] = gF[j]
    for j in range(m):
        H[nm + j] = gf[n + j]
    for i in range(s):
        mi = mu[i]
        for j in range(nm):
            H[j] += JG[i, j] * mi
    for i in range(t):
        wi = nu[i] - lam * nh[i]
        hi = nh[i]
        for j in range(nm):
            H[j] += Jg[i, j] * wi
        for j in range(m):
            H[nm + j] += Jg[i, n + j] * hi
    for i in range(s):
        calG[i] = G[i]
    for i in range(t):
        calG[s + i] = g[i]
        calG[s + t + i] = g[i]
    if setting == VAR1:
        calG[s + 2 * t] = 0.0


@njit(cache=False)
def _jacobians(second, data, setting, lam_fixed, n, m, s, t, z, JG, Jg, HL, Hl, JH, JGc):
    # expects JG/Jg already filled by _values at the same z
    nm = n + m
    p1 = nm + 1 if setting == VAR2 else nm
    lam = _lam_of(z, setting, lam_fixed, nm, p1, s, t)
    mu = z[p1 : p1 + s]
    nu = z[p1 + s : p1 + s + t]
    nh = z[p1 + s + t : p1 + s + 2 * t]
    wgt = nu - lam * nh
    second(z[:nm], data, mu, wgt, nh, HL, Hl)
    # explicit loops: numba's 2-D slice assignment is much slower at these sizes
    JH.fill(0.0)
    JGc.fill(0.0)
    c_mu = p1
    c_nu = p1 + s
    c_nh = p1 + s + t
    for j in range(nm):
        for k in range(nm):
            JH[j, k] = HL[j, k]
        for i in range(s):
            JH[j, c_mu + i] = JG[i, j]
        for i in range(t):
            JH[j, c_nu + i] = Jg[i, j]
            JH[j, c_nh + i] = -lam * Jg[i, j]
    if setting != PARA:
        col = p1 + s + 2 * t if setting == VAR1 else nm
        scale = -1.0 if setting == VAR1 else -2.0 * z[nm]
        for j in range(nm):
            acc = 0.0
            for i in range(t):
                acc += Jg[i, j] * nh[i]
            JH[j, col] = scale * acc
    for j in range(m):
        for k in range(nm):
            JH[nm + j, k] = Hl[n + j, k]
        for i in range(t):
            JH[nm + j, c_nh + i] = Jg[i, n + j]
    for k in range(nm):
        for i in range(s):
            JGc[i, k] = JG[i, k]
        for i in range(t):
            JGc[s + i, k] = Jg[i, k]
            JGc[s + t + i, k] = Jg[i, k]


@njit(cache=False)
def _fb_residual(H, calG, xi, out):
    q1 = H.shape[0]
    for i in range(q1):
        out[i] = H[i]
    for i in range(calG.shape[0]):
        a = calG[i]
        b = -xi[i]
        out[q1 + i] = a + b + math.hypot(a, b)


@njit(cache=False)
def _all_finite(a):
    for v in a.ravel():
        if not np.isfinite(v):
            return False
    return True


@njit(cache=False)
def _sumsq(v):
    # same summation order as the merit evaluation, so psi values compare consistently
    acc = 0.0
    for x in v:
        acc += x * x
    return acc


@njit(cache=False)
def _merit(first, data, setting, lam_fixed, n, m, s, t, z, G, g, JG, Jg, gF, gf, H, calG, F):
    _values(first, data, setting, lam_fixed, n, m, s, t, z, G, g, JG, Jg, gF, gf, H, calG, False)
    p1 = z.shape[0] - calG.shape[0]
    _fb_residual(H, calG, z[p1:], F)
    if not _all_finite(F):
        return np.inf
    val = 0.5 * _sumsq(F)
    if not np.isfinite(val):
        return np.inf
    return val


@njit(cache=False)
def _newton_blocks(H, calG, xi, JH, JGc, p1, Ffb, Fmax, Jfb, Jmax):
    q1 = H.shape[0]
    p2 = calG.shape[0]
    for i in range(q1):
        Fmax[i] = H[i]
        Ffb[i] = H[i]
        for j in range(JH.shape[1]):
            Jfb[i, j] = JH[i, j]
            Jmax[i, j] = JH[i, j]
    for i in range(p2):
        a = calG[i]
        b = -xi[i]
        r = math.hypot(a, b)
        Ffb[q1 + i] = a + b + r
        Fmax[q1 + i] = max(a, b)
        if a * a + b * b == 0.0:
            va = 1.0 + math.sqrt(2.0) / 2.0
            vb = va
        else:
            va = 1.0 + a / r
            vb = 1.0 + b / r
        for j in range(JGc.shape[1]):
            Jfb[q1 + i, j] = va * JGc[i, j]
            if a >= b:
                Jmax[q1 + i, j] = JGc[i, j]
            else:
                Jmax[q1 + i, j] = 0.0
        Jfb[q1 + i, p1 + i] -= vb
        if not a >= b:
            Jmax[q1 + i, p1 + i] -= 1.0


@njit(cache=False)
def _gram(J):
    """``J^T J`` using the nonzero pattern of each row (Jacobians here are sparse)."""
    q, p = J.shape
    A = np.zeros((p, p))
    idx = np.empty(p, dtype=np.int64)
    for r in range(q):
        k = 0
        for c in range(p):
            if J[r, c] != 0.0:
                idx[k] = c
                k += 1
        for a in range(k):
            ca = idx[a]
            va = J[r, ca]
            for b in range(a, k):
                cb = idx[b]
                A[ca, cb] += va * J[r, cb]
    for i in range(p):
        for j in range(i + 1, p):
            A[j, i] = A[i, j]
    return A


@njit(cache=False)
def _regularized_solve(J, rhs, nu):
    A = _gram(J)
    p = A.shape[0]
    for i in range(p):
        A[i, i] += nu
    if not _all_finite(A):
        return np.zeros(p), False
    L = np.linalg.cholesky(A)
    y = np.empty(p)
    for i in range(p):
        acc = rhs[i]
        for j in range(i):
            acc -= L[i, j] * y[j]
        y[i] = acc / L[i, i]
    d = np.empty(p)
    for i in range(p - 1, -1, -1):
        acc = y[i]
        for j in range(i + 1, p):
            acc -= L[j, i] * d[j]
        d[i] = acc / L[i, i]
    return d, True


@njit(cache=False)
def lm_kernel(
    first, second, data, setting, lam_fixed, n, m, s, t,
    z0, use_max, params, max_iter, max_bt, keep_trace,
    G, g, JG, Jg, gF, gf, HL, Hl,
    tr_psi, tr_nF, tr_ng, tr_nu, tr_step, tr_alpha, tr_nd, tr_ratio,
):  # fmt: skip
    kappa, tau_abs, tau_stat, sigma, beta, gamma1, gamma2, angle, rho2 = (
        params[0], params[1], params[2], params[3], params[4], params[5], params[6], params[7], params[8]
    )  # fmt: skip
    nm = n + m
    p1 = nm + 1 if setting == VAR2 else nm
    p2 = s + 2 * t + (1 if setting == VAR1 else 0)
    q1 = nm + m
    p = p1 + p2
    q = q1 + p2
    z = z0.copy()
    H = np.zeros(q1)
    calG = np.zeros(p2)
    JH = np.zeros((q1, p))
    JGc = np.zeros((p2, p))
    Ffb = np.zeros(q)
    Fmax = np.zeros(q)
    Jfb = np.zeros((q, p))
    Jmax = np.zeros((q, p))
    Ftrial = np.zeros(q)
    Ht = np.zeros(q1)
    calGt = np.zeros(p2)

    n_full = 0
    n_damped = 0
    n_grad = 0
    k = 0
    term = 0
    status = OK
    nF = np.nan
    ng = np.nan
    info_psi = np.nan
    info_slope = np.nan
    info_alpha = np.nan
    while True:
        _values(first, data, setting, lam_fixed, n, m, s, t, z, G, g, JG, Jg, gF, gf, H, calG, True)
        _jacobians(second, data, setting, lam_fixed, n, m, s, t, z, JG, Jg, HL, Hl, JH, JGc)
        if not (_all_finite(H) and _all_finite(calG) and _all_finite(JH) and _all_finite(JGc)):
            nF = np.nan
            ng = np.nan
            status = NONFINITE
            break
        _newton_blocks(H, calG, z[p1:], JH, JGc, p1, Ffb, Fmax, Jfb, Jmax)
        sq = _sumsq(Ffb)
        nF = math.sqrt(sq)
        grad = Jfb.T @ Ffb
        ng = math.sqrt(grad @ grad)
        if nF < tau_abs:
            term = 1
            break
        if ng < tau_stat:
            term = 2
            break
        if k >= max_iter:
            term = 0
            break

        psi = 0.5 * sq
        nu = min(gamma1, gamma2 * nF)
        if use_max:
            d, ok = _regularized_solve(Jmax, -(Jmax.T @ Fmax), nu)
        else:
            d, ok = _regularized_solve(Jfb, -grad, nu)
        if not ok:
            status = FACTOR_FAIL
            break
        nd = math.sqrt(d @ d)

        trial = z + d
        psi_trial = _merit(first, data, setting, lam_fixed, n, m, s, t, trial, G, g, JG, Jg, gF, gf, Ht, calGt, Ftrial)
        ratio = psi_trial / psi
        alpha = 1.0
        step = STEP_FULL
        if psi_trial <= kappa * psi:
            z = trial
            n_full += 1
            psi_new = psi_trial
        else:
            slope = grad @ d
            if slope > -angle * ng * nd or (use_max and nd < rho2):
                d = -grad
                nd = ng
                slope = -ng * ng
                step = STEP_GRADIENT
            else:
                step = STEP_DAMPED
            accepted = False
            psi_new = np.inf
            trial = np.empty(p)
            for _ in range(max_bt):
                alpha *= beta
                same = True
                for j in range(p):
                    trial[j] = z[j] + alpha * d[j]
                    if trial[j] != z[j]:
                        same = False
                if same:
                    status = STEP_VANISHED
                    break
                psi_new = _merit(first, data, setting, lam_fixed, n, m, s, t, trial, G, g, JG, Jg, gF, gf, Ht, calGt, Ftrial)
                # difference form: psi + alpha*sigma*slope can round back to psi
                if psi_new - psi <= alpha * sigma * slope:
                    accepted = True
                    break
            if not accepted:
                if status == OK:
                    status = ARMIJO_CAP
                info_psi = psi
                info_slope = slope
                info_alpha = alpha
                break
            z = trial
            if step == STEP_GRADIENT:
                n_grad += 1
            else:
                n_damped += 1
        if psi_new > psi:
            status = MERIT_INCREASE
            info_psi = psi
            break
        if keep_trace:
            tr_psi[k] = psi
            tr_nF[k] = nF
            tr_ng[k] = ng
            tr_nu[k] = nu
            tr_step[k] = step
            tr_alpha[k] = alpha
            tr_nd[k] = nd
            tr_ratio[k] = ratio
        k += 1
    return z, k, term, status, n_full, n_damped, n_grad, nF, ng, info_psi, info_slope, info_alpha


def run_lm(sysc: CompiledSystem, z0: np.ndarray, use_max: bool, params: np.ndarray, max_iter: int, max_bt: int, keep_trace: bool):
    """Run :func:`lm_kernel` for one start; returns the raw result tuple and the trace columns."""
    kern = sysc.kernels
    work = _Work(sysc)
    size = max_iter if keep_trace else 0
    cols = (
        np.zeros(size),
        np.zeros(size),
        np.zeros(size),
        np.zeros(size),
        np.zeros(size, dtype=np.int64),
        np.zeros(size),
        np.zeros(size),
        np.zeros(size),
    )
    out = lm_kernel(
        kern.first, kern.second, kern.data, sysc.setting, float(sysc.lam), sysc.n, sysc.m, sysc.s, sysc.t,
        np.ascontiguousarray(z0, dtype=float), bool(use_max), params, int(max_iter), int(max_bt), bool(keep_trace),
        *work.arrays, *cols,
    )  # fmt: skip
    return out, cols


def warm_up(sysc: CompiledSystem) -> None:
    """Trigger compilation for this kernel set outside any timed region."""
    p1, p2, _ = sysc.dims
    z = np.ones(p1 + p2)
    params = np.array([0.5, 1e-6, 1e-8, 0.5, 0.5, 0.5, 0.5, 1e-2, 1e-12])
    for use_max in (True, False):
        run_lm(sysc, z, use_max, params, 1, 1, True)


def evaluate_values(sysc: CompiledSystem, z: np.ndarray):
    """``(H, calG)`` at ``z`` through the compiled kernels (used for cross-checks)."""
    work = _Work(sysc)
    p1, p2, q1 = sysc.dims
    H = np.zeros(q1)
    calG = np.zeros(p2)
    G, g, JG, Jg, gF, gf, _, _ = work.arrays
    k = sysc.kernels
    _values(k.first, k.data, sysc.setting, float(sysc.lam), sysc.n, sysc.m, sysc.s, sysc.t, np.ascontiguousarray(z, dtype=float), G, g, JG, Jg, gF, gf, H, calG, True)
    return H, calG


def evaluate_jacobians(sysc: CompiledSystem, z: np.ndarray):
    work = _Work(sysc)
    p1, p2, q1 = sysc.dims
    G, g, JG, Jg, gF, gf, HL, Hl = work.arrays
    k = sysc.kernels
    z = np.ascontiguousarray(z, dtype=float)
    _values(k.first, k.data, sysc.setting, float(sysc.lam), sysc.n, sysc.m, sysc.s, sysc.t, z, G, g, JG, Jg, gF, gf, np.zeros(q1), np.zeros(p2), True)
    JH = np.zeros((q1, p1 + p2))
    JGc = np.zeros((p2, p1 + p2))
    _jacobians(k.second, k.data, sysc.setting, float(sysc.lam), sysc.n, sysc.m, sysc.s, sysc.t, z, JG, Jg, HL, Hl, JH, JGc)
    return JH, JGc


# -- kernels of the built-in problems -----------------------------------------


@njit(cache=False)
def example8_first(v, data, full, G, g, JG, Jg, gF, gf):
    x = v[0]
    y = v[1]
    G[0] = -x
    g[0] = y * y - x
    JG[0, 0] = -1.0
    JG[0, 1] = 0.0
    Jg[0, 0] = -1.0
    Jg[0, 1] = 2.0 * y
    gF[0] = 2.0 * (x - 8.0)
    gF[1] = 2.0 * (y - 9.0)
    gf[0] = 0.0
    gf[1] = 2.0 * (y - 3.0)


@njit(cache=False)
def example8_second(v, data, mu, wgt, nu_hat, HL, Hl):
    HL[0, 0] = 2.0
    HL[0, 1] = 0.0
    HL[1, 0] = 0.0
    HL[1, 1] = 2.0 + 2.0 * wgt[0]
    Hl[0, 0] = 0.0
    Hl[0, 1] = 0.0
    Hl[1, 0] = 0.0
    Hl[1, 1] = 2.0 + 2.0 * nu_hat[0]


@njit(cache=False)
def example8_upper(v, data):
    return (v[0] - 8.0) ** 2 + (v[1] - 9.0) ** 2


def example8_kernels() -> BilevelKernels:
    return BilevelKernels(example8_first, example8_second, example8_upper, (np.zeros(1),))


@njit(cache=False)
def _copy2(src, dst):
    for i in range(src.shape[0]):
        for j in range(src.shape[1]):
            dst[i, j] = src[i, j]


@njit(cache=False)
def _affine(A, c, v, out):
    for i in range(A.shape[0]):
        acc = c[i]
        for j in range(A.shape[1]):
            acc += A[i, j] * v[j]
        out[i] = acc


@njit(cache=False)
def affine_first(v, data, full, G, g, JG, Jg, gF, gf):
    # data = (AG, cG, Ag, cg, HF, y_obs, grad_f)
    AG, cG, Ag, cg, HF, yo, lin = data
    n = v.shape[0] - yo.shape[0]
    _affine(AG, cG, v, G)
    _affine(Ag, cg, v, g)
    if full:
        _copy2(AG, JG)
        _copy2(Ag, Jg)
    for j in range(n):
        gF[j] = 0.0
    for j in range(yo.shape[0]):
        gF[n + j] = v[n + j] - yo[j]
    for j in range(lin.shape[0]):
        gf[j] = lin[j]


@njit(cache=False)
def affine_second(v, data, mu, wgt, nu_hat, HL, Hl):
    HF = data[4]
    _copy2(HF, HL)
    Hl.fill(0.0)


@njit(cache=False)
def affine_upper(v, data):
    yo = data[5]
    n = v.shape[0] - yo.shape[0]
    r = v[n:] - yo
    return 0.5 * (r @ r)


def transport_kernels(AG, cG, Ag, cg, HF, y_obs, grad_f) -> BilevelKernels:
    data = tuple(np.ascontiguousarray(a, dtype=float) for a in (AG, cG, Ag, cg, HF, y_obs, grad_f))
    return BilevelKernels(affine_first, affine_second, affine_upper, data)
