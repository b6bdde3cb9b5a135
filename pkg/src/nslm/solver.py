"""Nonsmooth Levenberg-Marquardt methods for MNLCS.

Three drivers share one linear-algebra kernel (:func:`lm_step`):

* :func:`local_lm` -- plain full-step LM iteration on either residual.
* :func:`global_lm_mix` -- LM directions from the max residual, globalized with
  the FB merit function ``Psi = 0.5 * ||F_FB||^2`` (ratio test, angle test,
  Armijo backtracking along LM or negative gradient directions).
* :func:`global_lm_fb` -- the same scheme with directions from the FB residual.
"""

from __future__ import annotations

import csv
import enum
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from nslm.mnlcs import (
    MnlcsProblem,
    NonFiniteError,
    dn_ffb_from,
    dn_fmax_from,
    evaluate,
    ffb_from,
    fmax_from,
)


class DirectionKind(str, enum.Enum):
    MAX = "max"
    FB = "fb"


class Term(enum.IntEnum):
    MAX_ITER = 0
    SMALL_RESIDUAL = 1
    STATIONARY = 2


class SolverError(RuntimeError):
    """Numerical breakdown during a solve; ``result`` holds the state reached."""

    def __init__(self, message: str, result: LmResult | None = None):
        super().__init__(message)
        self.result = result


class ArmijoFailure(SolverError):
    pass


@dataclass(frozen=True)
class LmConfig:
    """Parameters of the LM methods.

    Defaults are the Experiment-1 settings. ``rho1``/``rho2`` belong to the
    mixed method, ``rho`` to the FB method.
    """

    kappa: float = 0.8
    tau_abs: float = 1e-6
    tau_abs_stat: float = 1e-8
    sigma: float = 0.5
    beta: float = 0.5
    gamma1: float = 0.5
    gamma2: float = 0.5
    rho1: float = 1e-2
    rho2: float = 1e-12
    rho: float = 1e-2
    max_iter: int = 100_000
    direction_kind: DirectionKind = DirectionKind.MAX

    def __post_init__(self):
        object.__setattr__(self, "direction_kind", DirectionKind(self.direction_kind))
        for name in ("kappa", "sigma", "beta"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        for name in ("tau_abs", "tau_abs_stat", "gamma1", "gamma2", "rho1", "rho2", "rho"):
            v = getattr(self, name)
            if not (v > 0.0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ValueError(f"max_iter must be a positive integer, got {self.max_iter}")
        object.__setattr__(self, "max_iter", int(self.max_iter))

    @classmethod
    def experiment1(cls, **overrides) -> LmConfig:
        return cls(**overrides)

    @classmethod
    def experiment2(cls, **overrides) -> LmConfig:
        base = dict(
            kappa=0.9,
            tau_abs=1e-4,
            tau_abs_stat=1e-3,
            sigma=0.4,
            beta=0.9,
            gamma1=1e-4,
            gamma2=0.05,
            rho1=1e-4,
            rho2=1e-4,
            rho=1e-4,
            max_iter=10_000,
        )
        base.update(overrides)
        return cls(**base)

    def with_(self, **changes) -> LmConfig:
        return replace(self, **changes)

    @property
    def max_backtracks(self) -> int:
        # 100 halvings' worth of step reduction, whatever beta is
        return max(100, math.ceil(100 * math.log(2.0) / -math.log(self.beta)))

    @classmethod
    def field_types(cls) -> dict[str, type]:
        out = {}
        for f in fields(cls):
            if f.name == "max_iter":
                out[f.name] = int
            elif f.name == "direction_kind":
                out[f.name] = DirectionKind
            else:
                out[f.name] = float
        return out


@dataclass
class TraceRecord:
    iter: int
    psi_fb: float
    norm_F_fb: float
    norm_grad_psi: float
    nu: float
    step_type: str
    alpha: float
    direction_norm: float = float("nan")
    merit_ratio: float = float("nan")


TRACE_COLUMNS = ("iter", "psi_fb", "norm_F_fb", "norm_grad_psi", "nu", "step_type", "alpha")
STEP_TYPES = ("full_lm", "damped_lm", "gradient")
_FLOAT_COLUMNS = ("psi_fb", "norm_F_fb", "norm_grad_psi", "nu", "alpha", "direction_norm", "merit_ratio")


class Trace(Sequence):
    """Per-iteration records stored column-wise.

    Indexing yields :class:`TraceRecord` objects; :meth:`column` returns the
    underlying numpy array (``step_type`` as codes into ``STEP_TYPES``).
    """

    def __init__(self, columns: dict[str, np.ndarray] | None = None):
        if columns is None:
            columns = {name: np.zeros(0) for name in _FLOAT_COLUMNS}
            columns["step_code"] = np.zeros(0, dtype=np.int64)
        self._cols = columns
        self._n = len(columns["psi_fb"])

    @classmethod
    def from_rows(cls, rows: list[tuple]) -> Trace:
        """Rows are ``(psi, nF, ng, nu, step_code, alpha, nd, ratio)``."""
        arr = np.array(rows, dtype=float).reshape(len(rows), 8)
        cols = {
            "psi_fb": arr[:, 0],
            "norm_F_fb": arr[:, 1],
            "norm_grad_psi": arr[:, 2],
            "nu": arr[:, 3],
            "step_code": arr[:, 4].astype(np.int64),
            "alpha": arr[:, 5],
            "direction_norm": arr[:, 6],
            "merit_ratio": arr[:, 7],
        }
        return cls(cols)

    def __len__(self) -> int:
        return self._n

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(self._n))]
        if i < 0:
            i += self._n
        if not 0 <= i < self._n:
            raise IndexError(i)
        c = self._cols
        return TraceRecord(
            i,
            float(c["psi_fb"][i]),
            float(c["norm_F_fb"][i]),
            float(c["norm_grad_psi"][i]),
            float(c["nu"][i]),
            STEP_TYPES[int(c["step_code"][i])],
            float(c["alpha"][i]),
            float(c["direction_norm"][i]),
            float(c["merit_ratio"][i]),
        )

    def column(self, name: str) -> np.ndarray:
        if name == "iter":
            return np.arange(self._n)
        if name == "step_type":
            return np.array([STEP_TYPES[c] for c in self._cols["step_code"]], dtype=object)
        return self._cols[name]


@dataclass
class LmResult:
    z_final: np.ndarray
    term: Term
    iterations: int
    full_lm_steps: int
    damped_lm_steps: int
    gradient_steps: int
    elapsed_seconds: float
    final_norm_fb: float
    final_grad_norm: float
    trace: Trace = field(default_factory=Trace)

    @property
    def final_psi_fb(self) -> float:
        return 0.5 * self.final_norm_fb**2


def write_trace_csv(trace: Trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for rec in trace:
            writer.writerow([rec.iter, repr(rec.psi_fb), repr(rec.norm_F_fb), repr(rec.norm_grad_psi), repr(rec.nu), rec.step_type, repr(rec.alpha)])


# -- linear algebra kernel -------------------------------------------------


def lm_step(J: np.ndarray, F: np.ndarray, nu: float) -> np.ndarray:
    """Solve ``(J^T J + nu I) d = -J^T F`` by Cholesky factorization."""
    if not nu > 0.0:
        raise ValueError(f"nu must be positive, got {nu}")
    J = np.asarray(J, dtype=float)
    F = np.asarray(F, dtype=float)
    return _regularized_solve(J, -(J.T @ F), nu)


def _regularized_solve(J: np.ndarray, rhs: np.ndarray, nu: float) -> np.ndarray:
    A = J.T @ J
    A[np.diag_indices_from(A)] += nu
    try:
        c = cho_factor(A, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise SolverError(f"Cholesky factorization failed: {exc}") from exc
    return cho_solve(c, rhs, check_finite=False)


# -- drivers ---------------------------------------------------------------


def _merit_at(prob: MnlcsProblem, z: np.ndarray) -> float:
    """Psi_FB at a trial point; non-finite callback output counts as +inf."""
    try:
        r = ffb_from(evaluate(prob, z, jacobians=False))
    except (NonFiniteError, FloatingPointError):
        return math.inf
    val = 0.5 * float(r @ r)
    return val if math.isfinite(val) else math.inf


def local_lm(prob: MnlcsProblem, z0, cfg: LmConfig) -> LmResult:
    """Full-step LM iteration on the residual selected by ``cfg.direction_kind``.

    Uses ``nu_k = min(gamma1, gamma2 * ||F(z^k)||)`` and stops with
    ``Term.SMALL_RESIDUAL`` once ``||F(z^k)|| < tau_abs`` or with
    ``Term.MAX_ITER``.
    """
    z = np.array(z0, dtype=float)
    use_max = cfg.direction_kind is DirectionKind.MAX
    rows: list[tuple] = []
    t0 = time.perf_counter()
    k = 0
    while True:
        ev = evaluate(prob, z)
        F = fmax_from(ev) if use_max else ffb_from(ev)
        nF = float(np.linalg.norm(F))
        Ffb = ffb_from(ev)
        g = dn_ffb_from(ev, prob.p1).T @ Ffb
        n_fb, n_g = float(np.linalg.norm(Ffb)), float(np.linalg.norm(g))
        if nF < cfg.tau_abs:
            term = Term.SMALL_RESIDUAL
            break
        if k >= cfg.max_iter:
            term = Term.MAX_ITER
            break
        nu = min(cfg.gamma1, cfg.gamma2 * nF)
        J = dn_fmax_from(ev, prob.p1) if use_max else dn_ffb_from(ev, prob.p1)
        d = lm_step(J, F, nu)
        rows.append((0.5 * n_fb**2, n_fb, n_g, nu, 0, 1.0, float(np.linalg.norm(d)), math.nan))
        z = z + d
        k += 1
        if not np.all(np.isfinite(z)):
            res = LmResult(z, Term.MAX_ITER, k, k, 0, 0, time.perf_counter() - t0, math.nan, math.nan, Trace.from_rows(rows))
            raise SolverError(f"non-finite iterate at iteration {k}", res)
    return LmResult(z, term, k, k, 0, 0, time.perf_counter() - t0, n_fb, n_g, Trace.from_rows(rows))


BACKENDS = ("auto", "python", "compiled")


def global_lm_mix(prob: MnlcsProblem, z0, cfg: LmConfig, trace: bool = True, backend: str = "auto") -> LmResult:
    """Globalized LM method with directions from the max residual."""
    if cfg.direction_kind is not DirectionKind.MAX:
        raise ValueError("global_lm_mix requires direction_kind=MAX")
    return _dispatch(prob, z0, cfg, True, trace, backend)


def global_lm_fb(prob: MnlcsProblem, z0, cfg: LmConfig, trace: bool = True, backend: str = "auto") -> LmResult:
    """Globalized LM method with directions from the FB residual."""
    if cfg.direction_kind is not DirectionKind.FB:
        raise ValueError("global_lm_fb requires direction_kind=FB")
    return _dispatch(prob, z0, cfg, False, trace, backend)


def solve(prob: MnlcsProblem, z0, cfg: LmConfig, trace: bool = True, backend: str = "auto") -> LmResult:
    """Dispatch to the global method matching ``cfg.direction_kind``.

    ``backend="auto"`` uses the compiled loop when the problem carries one
    (built-in bilevel problems do) and the Python loop otherwise.
    """
    return _dispatch(prob, z0, cfg, cfg.direction_kind is DirectionKind.MAX, trace, backend)


def _dispatch(prob, z0, cfg, use_max, keep_trace, backend):
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    z = np.array(z0, dtype=float)
    if z.shape != (prob.n_vars,):
        raise ValueError(f"start point has shape {z.shape}, expected ({prob.n_vars},)")
    if backend == "compiled" and prob.compiled is None:
        raise ValueError(f"problem {prob.name!r} has no compiled kernels")
    if backend != "python" and prob.compiled is not None:
        return _global_lm_compiled(prob, z, cfg, use_max, keep_trace)
    return _global_lm(prob, z, cfg, use_max, keep_trace)


_WARM: set = set()


def _global_lm_compiled(prob: MnlcsProblem, z: np.ndarray, cfg: LmConfig, use_max: bool, keep_trace: bool) -> LmResult:
    from nslm import compiled as cmp

    sysc = prob.compiled
    key = (id(sysc.kernels.first), id(sysc.kernels.second), type(sysc.kernels.data).__name__, len(sysc.kernels.data))
    if key not in _WARM:
        cmp.warm_up(sysc)
        _WARM.add(key)
    params = np.array(
        [cfg.kappa, cfg.tau_abs, cfg.tau_abs_stat, cfg.sigma, cfg.beta, cfg.gamma1, cfg.gamma2, cfg.rho1 if use_max else cfg.rho, cfg.rho2]
    )
    t0 = time.perf_counter()
    out, cols = cmp.run_lm(sysc, z, use_max, params, cfg.max_iter, cfg.max_backtracks, keep_trace)
    elapsed = time.perf_counter() - t0
    z_fin, k, term, status, n_full, n_damped, n_grad, nF, ng, i_psi, i_slope, i_alpha = out
    trace = Trace()
    if keep_trace:
        names = ("psi_fb", "norm_F_fb", "norm_grad_psi", "nu", "step_code", "alpha", "direction_norm", "merit_ratio")
        trace = Trace({name: col[:k].copy() for name, col in zip(names, cols)})
    res = LmResult(np.asarray(z_fin), Term(int(term)), int(k), int(n_full), int(n_damped), int(n_grad), elapsed, float(nF), float(ng), trace)
    if status == cmp.OK:
        return res
    res.term = Term.MAX_ITER
    if status == cmp.NONFINITE:
        raise SolverError(f"non-finite data at iteration {k}", res)
    if status == cmp.FACTOR_FAIL:
        raise SolverError(f"Cholesky factorization failed at iteration {k}", res)
    if status == cmp.STEP_VANISHED:
        raise ArmijoFailure(
            f"Armijo step vanished in floating point at iteration {k} (psi={i_psi:.3e}, slope={i_slope:.3e}, alpha={i_alpha:.3e})", res
        )
    if status == cmp.ARMIJO_CAP:
        raise ArmijoFailure(
            f"Armijo backtracking failed after {cfg.max_backtracks} reductions at iteration {k} (psi={i_psi:.3e}, slope={i_slope:.3e})", res
        )
    raise SolverError(f"merit increased at iteration {k}", res)


def _global_lm(prob: MnlcsProblem, z: np.ndarray, cfg: LmConfig, use_max: bool, keep_trace: bool) -> LmResult:
    p1 = prob.p1
    angle = cfg.rho1 if use_max else cfg.rho
    max_bt = cfg.max_backtracks
    rows: list[tuple] = []
    n_full = n_damped = n_grad = 0
    t0 = time.perf_counter()
    k = 0

    def partial(term):
        return LmResult(z, term, k, n_full, n_damped, n_grad, time.perf_counter() - t0, nF, ng, Trace.from_rows(rows))

    while True:
        try:
            ev = evaluate(prob, z)
        except NonFiniteError as exc:
            nF = ng = math.nan
            raise SolverError(f"non-finite data at iteration {k}: {exc}", partial(Term.MAX_ITER)) from exc
        Ffb = ffb_from(ev)
        sq = float(Ffb @ Ffb)
        nF = math.sqrt(sq)
        Jfb = dn_ffb_from(ev, p1)
        g = Jfb.T @ Ffb
        ng = math.sqrt(float(g @ g))
        if nF < cfg.tau_abs:
            term = Term.SMALL_RESIDUAL
            break
        if ng < cfg.tau_abs_stat:
            term = Term.STATIONARY
            break
        if k >= cfg.max_iter:
            term = Term.MAX_ITER
            break

        # same formula as _merit_at so that a null step compares equal
        psi = 0.5 * sq
        nu = min(cfg.gamma1, cfg.gamma2 * nF)
        if use_max:
            J = dn_fmax_from(ev, p1)
            d = _regularized_solve(J, -(J.T @ fmax_from(ev)), nu)
        else:
            d = _regularized_solve(Jfb, -g, nu)
        nd = math.sqrt(float(d @ d))

        psi_trial = _merit_at(prob, z + d)
        ratio = psi_trial / psi
        if psi_trial <= cfg.kappa * psi:
            z = z + d
            step, alpha = "full_lm", 1.0
            n_full += 1
            psi_new = psi_trial
        else:
            slope = float(g @ d)
            if slope > -angle * ng * nd or (use_max and nd < cfg.rho2):
                d = -g
                nd = ng
                slope = -ng * ng
                step = "gradient"
            else:
                step = "damped_lm"
            alpha = 1.0
            for _ in range(max_bt):
                alpha *= cfg.beta
                trial = z + alpha * d
                if np.array_equal(trial, z):
                    # the step vanished in floating point before the Armijo
                    # test could be met; the iteration would repeat forever
                    raise ArmijoFailure(
                        f"Armijo step vanished in floating point at iteration {k} "
                        f"(psi={psi:.3e}, slope={slope:.3e}, alpha={alpha:.3e})",
                        partial(Term.MAX_ITER),
                    )
                psi_new = _merit_at(prob, trial)
                # difference form: psi + alpha*sigma*slope can round back to psi
                if psi_new - psi <= alpha * cfg.sigma * slope:
                    break
            else:
                raise ArmijoFailure(
                    f"Armijo backtracking failed after {max_bt} reductions at iteration {k} "
                    f"(psi={psi:.3e}, slope={slope:.3e})",
                    partial(Term.MAX_ITER),
                )
            z = trial
            if step == "gradient":
                n_grad += 1
            else:
                n_damped += 1
        if psi_new > psi:
            raise SolverError(f"merit increased at iteration {k}", partial(Term.MAX_ITER))
        if keep_trace:
            rows.append((psi, nF, ng, nu, STEP_TYPES.index(step), alpha, nd, ratio))
        k += 1

    return LmResult(z, term, k, n_full, n_damped, n_grad, time.perf_counter() - t0, nF, ng, Trace.from_rows(rows))
