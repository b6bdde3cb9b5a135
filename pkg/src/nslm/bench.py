"""Benchmark harness: the two experiments, run records and performance profiles.

Six methods are compared: mixLM and FBLM, each on the Para, Var1 and Var2
encodings of the bilevel stationarity system. A sweep produces one
:class:`RunRecord` per (method, start point); :func:`perf_profile` turns a
metric matrix into Dolan-More step functions.
"""

from __future__ import annotations

import csv
import enum
import itertools
import logging
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from nslm.bilevel import (
    BilevelProblem,
    StationarityPoint,
    build,
    make_example8,
    make_transportation,
    to_iterate,
    upper_objective,
)
from nslm.mnlcs import MnlcsProblem
from nslm.solver import LmConfig, LmResult, SolverError, Term, solve

log = logging.getLogger(__name__)

CSV_HEADER = "solver,setting,instance,iterations,full_lm_steps,time_sec,term,final_psi_fb,final_grad_norm,final_objective"
METHODS = ("mixLM", "FBLM")
SOLVER_IDS = tuple(f"{m}-{s}" for s in ("para", "var1", "var2") for m in METHODS)
DEFAULT_OFFSET = 1e-6
TAU_POINTS = 512

EXP1_GRID_X = range(0, 11)
EXP1_GRID_Y = range(-5, 6)
EXP1_LAMBDA = 1.0
EXP2_X_RANGE = (1.0, 10.0)
EXP2_Y_RANGE = (0.0, 10.0)


@dataclass(frozen=True)
class RunRecord:
    solver: str
    setting: str
    instance: int
    iterations: int
    full_lm_steps: int
    time_sec: float
    term: int
    final_psi_fb: float
    final_grad_norm: float
    final_objective: float

    def __post_init__(self):
        if self.term not in (0, 1, 2):
            raise ValueError(f"term code must be 0, 1 or 2, got {self.term}")
        if self.iterations < 0 or self.full_lm_steps < 0 or self.full_lm_steps > self.iterations:
            raise ValueError(f"bad step counters: {self.full_lm_steps} full of {self.iterations}")
        if self.time_sec < 0:
            raise ValueError(f"negative time {self.time_sec}")

    @property
    def solver_id(self) -> str:
        return f"{self.solver}-{self.setting}"


def _method_of(solver_id: str) -> tuple[str, str]:
    method, setting = solver_id.split("-")
    return method, setting


# -- CSV persistence -----------------------------------------------------------


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        for r in records:
            writer.writerow([
                r.solver, r.setting, r.instance, r.iterations, r.full_lm_steps, f"{r.time_sec:.6f}",
                r.term, repr(r.final_psi_fb), repr(r.final_grad_norm), repr(r.final_objective),
            ])  # fmt: skip


def read_records(path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\r\n")
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        types = [f.type for f in fields(RunRecord)]
        casts = {"str": str, "int": int, "float": float}
        out = []
        for lineno, row in enumerate(csv.reader(fh), start=2):
            if not row:
                continue
            if len(row) != len(types):
                raise ValueError(f"{path}:{lineno}: expected {len(types)} fields, got {len(row)}")
            out.append(RunRecord(*(casts[t](v) for t, v in zip(types, row))))
    return out


# -- performance profiles ------------------------------------------------------


class Metric(str, enum.Enum):
    ITERATIONS = "iters"
    TIME = "time"
    OBJECTIVE = "objective"
    FULL_LM_FRACTION = "fullsteps"


def perf_ratios(t) -> np.ndarray:
    """``r[s, i] = t[s, i] / min_s' t[s', i]`` for a solvers x instances matrix."""
    t = np.asarray(t, dtype=float)
    if t.ndim != 2 or t.size == 0:
        raise ValueError(f"metric matrix must be non-empty 2-D, got shape {t.shape}")
    if not np.all(np.isfinite(t)) or np.any(t <= 0.0):
        raise ValueError("performance metrics must be finite and positive")
    return t / t.min(axis=0, keepdims=True)


@dataclass(frozen=True)
class ProfileTable:
    solvers: tuple
    metric: np.ndarray
    ratios: np.ndarray
    taus: np.ndarray
    omega: np.ndarray  # (n_solvers, n_taus)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["tau", *self.solvers])
            for j, tau in enumerate(self.taus):
                writer.writerow([repr(float(tau)), *(repr(float(w)) for w in self.omega[:, j])])

    def write_svg(self, path, title: str = "") -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        for k, name in enumerate(self.solvers):
            ax.step(self.taus, self.omega[k], where="post", label=name)
        if self.taus[-1] > 1.0:
            ax.set_xscale("log")
        ax.set_xlabel("tau")
        ax.set_ylabel("omega_s(tau)")
        ax.set_ylim(0.0, 1.02)
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right", fontsize="small")
        fig.tight_layout()
        fig.savefig(path, format="svg")
        plt.close(fig)


def tau_grid(ratios, n: int = TAU_POINTS) -> np.ndarray:
    """``n`` log-spaced points on ``[1, max r]``; the top point is exactly ``max r``."""
    top = float(np.max(ratios))
    if top <= 1.0:
        return np.ones(1)
    taus = np.geomspace(1.0, top, n)
    taus[0], taus[-1] = 1.0, top
    return taus


def perf_profile(r, taus=None, solvers=None, metric=None) -> ProfileTable:
    """``omega[s, j] = |{i : r[s, i] <= taus[j]}| / |I|``."""
    r = np.asarray(r, dtype=float)
    taus = tau_grid(r) if taus is None else np.asarray(taus, dtype=float)
    if taus.ndim != 1 or taus.size == 0:
        raise ValueError("tau grid must be a non-empty vector")
    if np.any(np.diff(taus) < 0) or taus[0] < 1.0:
        raise ValueError("tau grid must be sorted and >= 1")
    n_inst = r.shape[1]
    srt = np.sort(r, axis=1)
    counts = np.stack([np.searchsorted(row, taus, side="right") for row in srt])
    solvers = tuple(solvers) if solvers is not None else tuple(f"s{k}" for k in range(r.shape[0]))
    return ProfileTable(solvers, np.asarray(metric) if metric is not None else r, r, taus, counts / n_inst)


def metric_value(rec: RunRecord, kind: Metric, best_known: float = 0.0, offset: float = DEFAULT_OFFSET) -> float:
    kind = Metric(kind)
    if kind is Metric.ITERATIONS:
        return float(rec.iterations)
    if kind is Metric.TIME:
        return float(rec.time_sec)
    if not offset > 0.0:
        raise ValueError(f"offset must be positive, got {offset}")
    if kind is Metric.OBJECTIVE:
        # infeasible end points can undercut the best known value; clamp at the offset
        return max(rec.final_objective - best_known, 0.0) + offset
    if rec.iterations == 0:
        return offset
    return 1.0 - rec.full_lm_steps / rec.iterations + offset


def metric_transform(records, kind, best_known: float = 0.0, offset: float = DEFAULT_OFFSET):
    """Metric matrix ``(solvers, instances)`` from run records.

    Returns ``(matrix, solver_ids, instance_ids)``; every solver must cover the
    same instance set.
    """
    by_solver: dict[str, dict[int, RunRecord]] = {}
    for rec in records:
        by_solver.setdefault(rec.solver_id, {})[rec.instance] = rec
    if not by_solver:
        raise ValueError("no records")
    solvers = [s for s in SOLVER_IDS if s in by_solver] + sorted(set(by_solver) - set(SOLVER_IDS))
    instances = sorted(by_solver[solvers[0]])
    for s in solvers:
        if sorted(by_solver[s]) != instances:
            raise ValueError(f"solver {s} does not cover the same instances as {solvers[0]}")
    t = np.array([[metric_value(by_solver[s][i], kind, best_known, offset) for i in instances] for s in solvers])
    return t, solvers, instances


def best_known_objective(records, problem: str) -> float:
    """Reference value for the objective metric.

    ``example8`` has the known global value 37. For the synthetic transport
    data the reference is the best final objective among small-residual runs
    (all runs if none converged).
    """
    if problem == "example8":
        return 37.0
    conv = [r.final_objective for r in records if r.term == Term.SMALL_RESIDUAL and math.isfinite(r.final_objective)]
    pool = conv or [r.final_objective for r in records if math.isfinite(r.final_objective)]
    if not pool:
        raise ValueError("no finite objective values to derive a reference from")
    return min(pool)


def profile_from_records(records, kind, best_known: float | None = None, problem: str = "example8", offset: float = DEFAULT_OFFSET) -> ProfileTable:
    kind = Metric(kind)
    if best_known is None:
        best_known = best_known_objective(records, problem) if kind is Metric.OBJECTIVE else 0.0
    t, solvers, _ = metric_transform(records, kind, best_known, offset)
    return perf_profile(perf_ratios(t), solvers=solvers, metric=t)


# -- sweeps --------------------------------------------------------------------


def _method_config(base: LmConfig, method: str) -> LmConfig:
    return base.with_(direction_kind="max" if method == "mixLM" else "fb")


def run_one(
    bp: BilevelProblem, prob: MnlcsProblem, method: str, setting: str, instance: int, z0, cfg: LmConfig, timing: bool = True, on_result=None
) -> RunRecord:
    """Solve once and summarize; numerical breakdown is recorded as Term=0.

    ``on_result(record, result)`` is called after the run when given; the
    result then carries the full iteration trace.
    """
    t0 = time.perf_counter()
    try:
        res: LmResult = solve(prob, z0, cfg, trace=on_result is not None)
        term = int(res.term)
    except SolverError as exc:
        res = exc.result
        term = int(Term.MAX_ITER)
        log.debug("%s-%s instance %d: %s", method, setting, instance, exc)
        if res is None:
            raise
    elapsed = res.elapsed_seconds if res.elapsed_seconds else time.perf_counter() - t0
    rec = RunRecord(
        solver=method,
        setting=setting,
        instance=int(instance),
        iterations=int(res.iterations),
        full_lm_steps=int(res.full_lm_steps),
        time_sec=round(float(elapsed), 6) if timing else 0.0,
        term=term,
        final_psi_fb=float(res.final_psi_fb),
        final_grad_norm=float(res.final_grad_norm),
        final_objective=upper_objective(bp, res.z_final),
    )
    if on_result is not None:
        on_result(rec, res)
    return rec


def _sweep(bp: BilevelProblem, starts, cfg: LmConfig, lam: float, timing: bool, solvers=SOLVER_IDS, on_result=None) -> list[RunRecord]:
    records = []
    for sid in solvers:
        method, setting = _method_of(sid)
        prob = build(bp, setting, lam)
        mcfg = _method_config(cfg, method)
        for inst, pt in enumerate(starts):
            records.append(run_one(bp, prob, method, setting, inst, to_iterate(bp, setting, pt), mcfg, timing, on_result))
    records.sort(key=lambda r: (SOLVER_IDS.index(r.solver_id) if r.solver_id in SOLVER_IDS else len(SOLVER_IDS), r.instance))
    return records


def experiment1_starts() -> list[StationarityPoint]:
    """The 11 x 11 grid ``{0..10} x {-5..5}``, x-major, multipliers 1, lambda = zeta = 1."""
    return [
        StationarityPoint([x], [y], [1.0], [1.0], [1.0], EXP1_LAMBDA, zeta=1.0)
        for x, y in itertools.product(EXP1_GRID_X, EXP1_GRID_Y)
    ]


def experiment2_starts(bp: BilevelProblem, seed: int, n_starts: int) -> list[StationarityPoint]:
    """Uniform starts; start ``k`` draws from child ``k`` of ``SeedSequence(seed)``."""
    if n_starts < 1:
        raise ValueError(f"n_starts must be >= 1, got {n_starts}")
    children = np.random.SeedSequence(int(seed)).spawn(int(n_starts))
    out = []
    for ss in children:
        rng = np.random.Generator(np.random.PCG64(ss))
        x = rng.uniform(*EXP2_X_RANGE, size=bp.n)
        y = rng.uniform(*EXP2_Y_RANGE, size=bp.m)
        out.append(StationarityPoint(x, y, np.ones(bp.s), np.ones(bp.t), np.ones(bp.t), 1.0, zeta=1.0))
    return out


def run_experiment1(overrides: dict | None = None, out_path=None, timing: bool = True, solvers=SOLVER_IDS, on_result=None) -> list[RunRecord]:
    """Six methods on the Example-8 grid; writes CSV when ``out_path`` is given.

    ``on_result`` is passed to :func:`run_one` for every run.
    """
    cfg = LmConfig.experiment1(**(overrides or {}))
    records = _sweep(make_example8(), experiment1_starts(), cfg, EXP1_LAMBDA, timing, solvers, on_result)
    if out_path is not None:
        write_records(records, Path(out_path))
    return records


def run_experiment2(
    seed: int = 0, n_starts: int = 500, overrides: dict | None = None, out_path=None, timing: bool = True, solvers=SOLVER_IDS, on_result=None
) -> list[RunRecord]:
    """Six methods on the seeded inverse transportation instance."""
    cfg = LmConfig.experiment2(**(overrides or {}))
    bp = make_transportation(seed)
    records = _sweep(bp, experiment2_starts(bp, seed, n_starts), cfg, 1.0, timing, solvers, on_result)
    if out_path is not None:
        write_records(records, Path(out_path))
    return records


@dataclass(frozen=True)
class Summary:
    solver_id: str
    runs: int
    mean_iterations: float
    mean_full_lm_steps: float
    mean_time: float
    term_counts: tuple
    objective_quantiles: tuple


def summarize(records) -> list[Summary]:
    """Averages and Term counts per solver, in the order of :data:`SOLVER_IDS`."""
    groups: dict[str, list[RunRecord]] = {}
    for r in records:
        groups.setdefault(r.solver_id, []).append(r)
    out = []
    for sid in sorted(groups, key=lambda s: SOLVER_IDS.index(s) if s in SOLVER_IDS else len(SOLVER_IDS)):
        rs = groups[sid]
        obj = np.array([r.final_objective for r in rs])
        out.append(
            Summary(
                solver_id=sid,
                runs=len(rs),
                mean_iterations=float(np.mean([r.iterations for r in rs])),
                mean_full_lm_steps=float(np.mean([r.full_lm_steps for r in rs])),
                mean_time=float(np.mean([r.time_sec for r in rs])),
                term_counts=tuple(sum(r.term == c for r in rs) for c in (0, 1, 2)),
                objective_quantiles=tuple(float(q) for q in np.quantile(obj, [0.1, 0.5, 0.9])),
            )
        )
    return out


def format_summary(summaries) -> str:
    lines = [f"{'solver':<12} {'runs':>5} {'iters':>10} {'full':>8} {'time':>9} {'T0':>4} {'T1':>4} {'T2':>4}  objective q10/q50/q90"]
    for s in summaries:
        t0, t1, t2 = s.term_counts
        q = "/".join(f"{v:.4g}" for v in s.objective_quantiles)
        lines.append(f"{s.solver_id:<12} {s.runs:>5} {s.mean_iterations:>10.2f} {s.mean_full_lm_steps:>8.2f} {s.mean_time:>9.4f} {t0:>4} {t1:>4} {t2:>4}  {q}")
    return "\n".join(lines)


__all__ = [
    "CSV_HEADER",
    "Metric",
    "ProfileTable",
    "RunRecord",
    "SOLVER_IDS",
    "best_known_objective",
    "experiment1_starts",
    "experiment2_starts",
    "format_summary",
    "metric_transform",
    "metric_value",
    "perf_profile",
    "perf_ratios",
    "profile_from_records",
    "read_records",
    "run_experiment1",
    "run_experiment2",
    "run_one",
    "summarize",
    "tau_grid",
    "write_records",
]
