"""Regularity diagnostics for computed MNLCS and bilevel solutions.

The MNLCS checks test full column rank of the matrices that govern local fast
convergence of the LM methods: for the max residual every choice of branch on
the biactive set is enumerated; for the FB residual the biactive pairs range
over a circle, which is sampled. The bilevel checks (LLICQ, BLICQ, a
second-order condition on the critical subspace, a biactive inclusion) are the
sufficient conditions that imply the MNLCS ones for the parametric setting.

Rank decisions use the smallest singular value against ``rank_tol``.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from nslm.bilevel import BilevelProblem, StationarityPoint, build_para, to_iterate
from nslm.mnlcs import MnlcsProblem, evaluate, index_sets, residual_max

DEFAULT_ACT_TOL = 1e-8
DEFAULT_RANK_TOL = 1e-8
MAX_BIACTIVE_MAX = 20
MAX_BIACTIVE_FB = 6
MAX_FB_COMBINATIONS = 100_000
_BATCH = 4096


class Verdict(str, enum.Enum):
    PASS = "Pass"
    FAIL = "Fail"
    INCONCLUSIVE = "Inconclusive"


@dataclass
class Witness:
    params: dict
    min_singular_value: float


@dataclass
class RegularityReport:
    verdict: Verdict
    witnesses: list[Witness]
    act_tol: float
    rank_tol: float
    heuristic: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def worst(self) -> Witness | None:
        return min(self.witnesses, key=lambda w: w.min_singular_value) if self.witnesses else None

    def to_text(self, title: str = "") -> str:
        lines = []
        if title:
            lines.append(f"[{title}]")
        lines.append(f"verdict: {self.verdict.value}" + (" (heuristic: sampled biactive circle)" if self.heuristic else ""))
        lines.append(f"act_tol: {self.act_tol:g}")
        lines.append(f"rank_tol: {self.rank_tol:g}")
        for w in self.witnesses:
            desc = ", ".join(f"{k}={_fmt(v)}" for k, v in w.params.items())
            lines.append(f"witness: {desc}; min singular value {w.min_singular_value:.3e}")
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return "(" + ", ".join(_fmt(u) for u in v) + ")"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _min_sv(stack: np.ndarray) -> np.ndarray:
    """Smallest singular value of each matrix in a ``(k, r, c)`` stack; 0 if ``r < c``."""
    k, r, c = stack.shape
    if c == 0:
        return np.full(k, np.inf)
    if r < c:
        return np.zeros(k)
    return np.linalg.svd(stack, compute_uv=False)[:, -1]


def _classify(prob: MnlcsProblem, z, act_tol: float):
    sets = index_sets(prob, z, act_tol)
    notes = []
    res = float(np.linalg.norm(residual_max(prob, z)))
    if res > max(math.sqrt(act_tol), 1e-12):
        notes.append(f"point is not a root of the max residual (norm {res:.3e}); conditions are stated at solutions")
    return sets, notes


# -- MNLCS conditions ---------------------------------------------------------


def check_max_regularity(
    prob: MnlcsProblem,
    z,
    act_tol: float = DEFAULT_ACT_TOL,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> RegularityReport:
    """Full column rank of ``[H'; G'_{I+ u I}; -e_{I- u Ic}]`` for all ``I`` in the biactive set."""
    sets, notes = _classify(prob, z, act_tol)
    b_idx = sorted(sets.i00)
    if len(b_idx) > MAX_BIACTIVE_MAX:
        notes.append(f"biactive set has {len(b_idx)} indices; at most {MAX_BIACTIVE_MAX} are enumerated")
        return RegularityReport(Verdict.INCONCLUSIVE, [], act_tol, rank_tol, notes=notes)
    ev = evaluate(prob, z)
    p1 = prob.p1
    base = np.vstack([ev.JH, np.zeros((prob.p2, prob.n_vars))])
    rows = prob.q1 + np.arange(prob.p2)
    for i in sets.i_plus:
        base[prob.q1 + i] = ev.JG[i]
    for i in sets.i_minus:
        base[prob.q1 + i, p1 + i] = -1.0
    sel = -np.eye(prob.n_vars)[p1 + np.arange(prob.p2)]

    k = len(b_idx)
    n_sub = 1 << k
    worst_sv, worst_mask = math.inf, 0
    for start in range(0, n_sub, _BATCH):
        masks = np.arange(start, min(n_sub, start + _BATCH))
        stack = np.repeat(base[None], masks.size, axis=0)
        for pos, i in enumerate(b_idx):
            in_I = ((masks >> pos) & 1).astype(bool)
            stack[:, rows[i]] = np.where(in_I[:, None], ev.JG[i], sel[i])
        sv = _min_sv(stack)
        j = int(np.argmin(sv))
        if sv[j] < worst_sv:
            worst_sv, worst_mask = float(sv[j]), int(masks[j])
    subset = tuple(i for pos, i in enumerate(b_idx) if (worst_mask >> pos) & 1)
    witness = Witness({"I": subset, "biactive": tuple(b_idx), "subsets": n_sub}, worst_sv)
    verdict = Verdict.PASS if worst_sv >= rank_tol else Verdict.FAIL
    return RegularityReport(verdict, [witness], act_tol, rank_tol, notes=notes)


def circle_angles(samples_per_index: int) -> np.ndarray:
    """Angles ``2*pi*j/N`` plus the mandatory ``pi/4, pi, 3*pi/2`` (listed first), without duplicates."""
    if samples_per_index < 0:
        raise ValueError("samples_per_index must be non-negative")
    cand = [math.pi / 4, math.pi, 1.5 * math.pi]
    cand += [2 * math.pi * j / samples_per_index for j in range(samples_per_index)]
    out: list[float] = []
    for th in cand:
        if not any(abs(th - u) < 1e-12 for u in out):
            out.append(th)
    return np.array(out)


def check_fb_regularity(
    prob: MnlcsProblem,
    z,
    act_tol: float = DEFAULT_ACT_TOL,
    rank_tol: float = DEFAULT_RANK_TOL,
    samples_per_index: int = 64,
    max_witnesses: int = 10,
) -> RegularityReport:
    """Sampled check of the FB regularity condition.

    Off the biactive set the weights are fixed (``(a, b) = (1, 0)`` on I+,
    ``(0, 1)`` on I-). Each biactive pair runs over ``(1 + cos t, 1 + sin t)``.
    A Fail is exact (a rank-deficient member was found); a Pass with a
    non-empty biactive set only covers the sampled angles and is flagged
    ``heuristic``.
    """
    sets, notes = _classify(prob, z, act_tol)
    b_idx = sorted(sets.i00)
    k = len(b_idx)
    if k > MAX_BIACTIVE_FB:
        notes.append(f"biactive set has {k} indices; sampling is limited to {MAX_BIACTIVE_FB}")
        return RegularityReport(Verdict.INCONCLUSIVE, [], act_tol, rank_tol, notes=notes)
    n_per = samples_per_index
    if k and (n_per + 3) ** k > MAX_FB_COMBINATIONS:
        n_per = max(0, int(MAX_FB_COMBINATIONS ** (1.0 / k)) - 3)
        notes.append(f"samples per biactive index reduced from {samples_per_index} to {n_per} to cap combinations at {MAX_FB_COMBINATIONS}")
    thetas = circle_angles(n_per)
    ab = np.column_stack([1.0 + np.cos(thetas), 1.0 + np.sin(thetas)])

    ev = evaluate(prob, z)
    p1 = prob.p1
    a0 = np.zeros(prob.p2)
    b0 = np.zeros(prob.p2)
    for i in sets.i_plus:
        a0[i] = 1.0
    for i in sets.i_minus:
        b0[i] = 1.0
    idx = np.arange(prob.p2)

    def stack_for(a, b):
        # a, b: (batch, p2)
        bottom = a[:, :, None] * ev.JG[None]
        bottom[:, idx, p1 + idx] -= b
        top = np.broadcast_to(ev.JH, (a.shape[0],) + ev.JH.shape)
        return np.concatenate([top, bottom], axis=1)

    combos = itertools.product(range(len(thetas)), repeat=k)
    failing: list[Witness] = []
    worst: Witness | None = None
    n_checked = 0
    while True:
        chunk = list(itertools.islice(combos, _BATCH))
        if not chunk:
            break
        ch = np.array(chunk, dtype=int).reshape(len(chunk), k)
        a = np.repeat(a0[None], len(chunk), axis=0)
        b = np.repeat(b0[None], len(chunk), axis=0)
        for pos, i in enumerate(b_idx):
            a[:, i] = ab[ch[:, pos], 0]
            b[:, i] = ab[ch[:, pos], 1]
        sv = _min_sv(stack_for(a, b))
        n_checked += len(chunk)
        for j in np.argsort(sv, kind="stable"):
            w = Witness(
                {
                    "biactive": tuple(b_idx),
                    "theta": tuple(float(thetas[c]) for c in ch[j]),
                    "a": tuple(float(a[j, i]) for i in b_idx),
                    "b": tuple(float(b[j, i]) for i in b_idx),
                },
                float(sv[j]),
            )
            if worst is None or w.min_singular_value < worst.min_singular_value:
                worst = w
            if sv[j] < rank_tol and len(failing) < max_witnesses:
                failing.append(w)
            elif sv[j] >= rank_tol:
                break
    notes.append(f"{n_checked} weight combinations checked")
    if failing:
        failing.sort(key=lambda w: w.min_singular_value)
        return RegularityReport(Verdict.FAIL, failing, act_tol, rank_tol, notes=notes)
    if k:
        notes.append("biactive pairs were sampled; Pass is necessary-only evidence")
    return RegularityReport(Verdict.PASS, [worst] if worst else [], act_tol, rank_tol, heuristic=k > 0, notes=notes)


# -- bilevel conditions -------------------------------------------------------


def _xy(x, y):
    return np.atleast_1d(np.asarray(x, dtype=float)), np.atleast_1d(np.asarray(y, dtype=float))


def _full_row_rank(A: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> bool:
    if A.shape[0] == 0:
        return True
    if A.shape[0] > A.shape[1]:
        return False
    return float(np.linalg.svd(A, compute_uv=False)[-1]) >= tol


def _active(vals: np.ndarray, act_tol: float) -> np.ndarray:
    return np.asarray(vals, dtype=float) >= -act_tol


def check_llicq(bp: BilevelProblem, x, y, act_tol: float = DEFAULT_ACT_TOL) -> bool:
    """Linear independence of the y-gradients of the active lower-level constraints."""
    x, y = _xy(x, y)
    act = _active(bp.g(x, y), act_tol)
    Jg = np.asarray(bp.jac_g(x, y), dtype=float).reshape(bp.t, bp.nm)
    return _full_row_rank(Jg[act, bp.n :])


def check_blicq(bp: BilevelProblem, x, y, act_tol: float = DEFAULT_ACT_TOL) -> bool:
    """Linear independence of the full gradients of all active upper- and lower-level constraints."""
    x, y = _xy(x, y)
    JG = np.asarray(bp.jac_G(x, y), dtype=float).reshape(bp.s, bp.nm)
    Jg = np.asarray(bp.jac_g(x, y), dtype=float).reshape(bp.t, bp.nm)
    A = np.vstack([JG[_active(bp.G(x, y), act_tol)], Jg[_active(bp.g(x, y), act_tol)]])
    return _full_row_rank(A)


def upper_lagrangian_hessian(bp: BilevelProblem, x, y, mu, nu, nu_hat, lam) -> np.ndarray:
    x, y = _xy(x, y)
    nm = bp.nm
    H = np.asarray(bp.hess_F(x, y), dtype=float).copy()
    if bp.s:
        H += np.tensordot(np.asarray(mu, dtype=float), np.asarray(bp.hess_G(x, y), dtype=float).reshape(bp.s, nm, nm), axes=1)
    if bp.t:
        wgt = np.asarray(nu, dtype=float) - lam * np.asarray(nu_hat, dtype=float)
        H += np.tensordot(wgt, np.asarray(bp.hess_g(x, y), dtype=float).reshape(bp.t, nm, nm), axes=1)
    return H


def critical_subspace(bp: BilevelProblem, x, y, mu, nu, nu_hat, act_tol: float = DEFAULT_ACT_TOL) -> np.ndarray:
    """Orthonormal basis (columns) of the directions annihilated by strictly active gradients."""
    x, y = _xy(x, y)
    mu, nu, nu_hat = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (mu, nu, nu_hat))
    JG = np.asarray(bp.jac_G(x, y), dtype=float).reshape(bp.s, bp.nm)
    Jg = np.asarray(bp.jac_g(x, y), dtype=float).reshape(bp.t, bp.nm)
    actG = _active(bp.G(x, y), act_tol)
    actg = _active(bp.g(x, y), act_tol)
    rows = np.vstack([JG[actG & (mu > act_tol)], Jg[actg & ((nu > act_tol) | (nu_hat > act_tol))]])
    if rows.shape[0] == 0:
        return np.eye(bp.nm)
    _, sv, vt = np.linalg.svd(rows)
    rank = int(np.sum(sv >= DEFAULT_RANK_TOL))
    return vt[rank:].T


def check_soc(bp: BilevelProblem, x, y, mu, nu, nu_hat, lam: float, act_tol: float = DEFAULT_ACT_TOL) -> bool:
    """Positive definiteness of the upper Lagrangian Hessian on the critical subspace."""
    B = critical_subspace(bp, x, y, mu, nu, nu_hat, act_tol)
    if B.shape[1] == 0:
        return True
    H = upper_lagrangian_hessian(bp, x, y, mu, nu, nu_hat, lam)
    red = B.T @ (0.5 * (H + H.T)) @ B
    return float(np.linalg.eigvalsh(red)[0]) > 1e-10


def check_thm_fb_inclusion(bp: BilevelProblem, x, y, nu, nu_hat, act_tol: float = DEFAULT_ACT_TOL) -> bool:
    """Biactive lower-level indices w.r.t. ``nu_hat`` must be strictly active w.r.t. ``nu``."""
    x, y = _xy(x, y)
    nu, nu_hat = np.atleast_1d(np.asarray(nu, dtype=float)), np.atleast_1d(np.asarray(nu_hat, dtype=float))
    act = _active(bp.g(x, y), act_tol)
    biactive_hat = act & ~(nu_hat > act_tol)
    plus = act & (nu > act_tol)
    return bool(np.all(plus[biactive_hat]))


@dataclass
class BilevelConditions:
    llicq: bool
    blicq: bool
    soc: bool
    fb_inclusion: bool

    @property
    def max_conditions(self) -> bool:
        """LLICQ, BLICQ and the second-order condition together."""
        return self.llicq and self.blicq and self.soc

    @property
    def fb_conditions(self) -> bool:
        return self.max_conditions and self.fb_inclusion


def bilevel_conditions(bp: BilevelProblem, pt: StationarityPoint, act_tol: float = DEFAULT_ACT_TOL) -> BilevelConditions:
    return BilevelConditions(
        llicq=check_llicq(bp, pt.x, pt.y, act_tol),
        blicq=check_blicq(bp, pt.x, pt.y, act_tol),
        soc=check_soc(bp, pt.x, pt.y, pt.mu, pt.nu, pt.nu_hat, pt.lam, act_tol),
        fb_inclusion=check_thm_fb_inclusion(bp, pt.x, pt.y, pt.nu, pt.nu_hat, act_tol),
    )


def para_reports(bp: BilevelProblem, pt: StationarityPoint, act_tol: float = DEFAULT_ACT_TOL, rank_tol: float = DEFAULT_RANK_TOL):
    """Max and FB regularity reports of the parametric system built with ``pt.lam``."""
    prob = build_para(bp, pt.lam)
    z = to_iterate(bp, "para", pt)
    return check_max_regularity(prob, z, act_tol, rank_tol), check_fb_regularity(prob, z, act_tol, rank_tol)
