"""Command line interface: ``nslm solve|check|experiment1|experiment2|profile``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from nslm import bench
from nslm.bilevel import SETTINGS, StationarityPoint, build, from_iterate, get_problem, to_iterate, upper_objective
from nslm.mnlcs import scalar_lcs
from nslm.regularity import Verdict, bilevel_conditions, check_fb_regularity, check_max_regularity
from nslm.solver import DirectionKind, LmConfig, SolverError, solve, write_trace_csv

log = logging.getLogger("nslm")

PROBLEMS = ("example8", "transport", "scalar_lcs")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_INCONCLUSIVE = 2
EXIT_SOLVER_ERROR = 3


def parse_floats(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from exc


def read_config(path) -> dict:
    """Flat ``key=value`` file; keys are :class:`LmConfig` field names, ``#`` starts a comment."""
    types = LmConfig.field_types()
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown parameter {key!r}; known: {', '.join(types)}")
        try:
            out[key] = types[key](float(value)) if types[key] is int else types[key](value)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return out


def _parse_param(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def _config(args, method: str | None) -> LmConfig:
    values = read_config(args.config) if args.config else {}
    types = LmConfig.field_types()
    for key, value in args.param or []:
        if key not in types:
            raise ValueError(f"unknown parameter {key!r}")
        values[key] = types[key](float(value)) if types[key] is int else types[key](value)
    if method is not None:
        values["direction_kind"] = DirectionKind.MAX if method == "mix" else DirectionKind.FB
    if args.problem == "transport":
        return LmConfig.experiment2(**values)
    return LmConfig.experiment1(**values)


def _system(args):
    """``(bilevel problem or None, MNLCS instance)`` for the CLI arguments."""
    if args.problem == "scalar_lcs":
        return None, scalar_lcs()
    bp = get_problem(args.problem, seed=args.seed)
    return bp, build(bp, args.setting, args.lam)


def _start(args, bp, prob) -> np.ndarray:
    n_vars = prob.p1 + prob.p2
    if args.start is None:
        if bp is None:
            return np.ones(n_vars)
        xy = bp.default_xy
    else:
        if args.start.size == n_vars:
            return args.start
        if bp is None or args.start.size != bp.nm:
            expect = f"{n_vars}" if bp is None else f"{n_vars} (full iterate) or {bp.nm} (x, y)"
            raise ValueError(f"--start has {args.start.size} entries, expected {expect}")
        xy = args.start
    # (x, y) given: multipliers start at 1, lambda (or zeta^2) from --lambda
    pt = StationarityPoint(xy[: bp.n], xy[bp.n :], np.ones(bp.s), np.ones(bp.t), np.ones(bp.t), args.lam, zeta=np.sqrt(args.lam))
    return to_iterate(bp, args.setting, pt)


def cmd_solve(args) -> int:
    bp, prob = _system(args)
    cfg = _config(args, args.method)
    z0 = _start(args, bp, prob)
    code = EXIT_OK
    try:
        res = solve(prob, z0, cfg, trace=args.trace is not None)
    except SolverError as exc:
        print(f"solver error: {exc}")
        res = exc.result
        code = EXIT_SOLVER_ERROR
    if res is None:
        return code
    print(f"problem: {prob.name}")
    print(f"method: {'mixLM' if cfg.direction_kind is DirectionKind.MAX else 'FBLM'}")
    if code == EXIT_OK:
        print(f"term: {int(res.term)} ({res.term.name.lower()})")
    print(f"iterations: {res.iterations}")
    print(f"full_lm_steps: {res.full_lm_steps}")
    print(f"damped_lm_steps: {res.damped_lm_steps}")
    print(f"gradient_steps: {res.gradient_steps}")
    print(f"norm_F_fb: {res.final_norm_fb:.6e}")
    print(f"norm_grad_psi: {res.final_grad_norm:.6e}")
    print(f"time_sec: {res.elapsed_seconds:.6f}")
    if bp is not None:
        print(f"upper_objective: {upper_objective(bp, res.z_final):.10g}")
    print("z: " + ",".join(repr(float(v)) for v in res.z_final))
    if args.trace is not None:
        write_trace_csv(res.trace, args.trace)
    return code


def cmd_check(args) -> int:
    bp, prob = _system(args)
    z = args.point
    if z.size != prob.p1 + prob.p2:
        raise ValueError(f"--point has {z.size} entries, expected {prob.p1 + prob.p2}")
    rmax = check_max_regularity(prob, z, args.act_tol, args.rank_tol)
    rfb = check_fb_regularity(prob, z, args.act_tol, args.rank_tol, samples_per_index=args.samples)
    print(rmax.to_text("max residual"))
    print()
    print(rfb.to_text("FB residual"))
    if bp is not None:
        pt = from_iterate(bp, args.setting, z, args.lam)
        cond = bilevel_conditions(bp, pt, args.act_tol)
        print()
        print("[bilevel conditions]")
        for name in ("llicq", "blicq", "soc", "fb_inclusion"):
            print(f"{name}: {'yes' if getattr(cond, name) else 'no'}")
    verdicts = {rmax.verdict, rfb.verdict}
    if Verdict.FAIL in verdicts:
        return EXIT_FAIL
    if Verdict.INCONCLUSIVE in verdicts:
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def cmd_experiment1(args) -> int:
    records = bench.run_experiment1(overrides=read_config(args.config) if args.config else None, out_path=args.out, timing=not args.no_timing)
    print(bench.format_summary(bench.summarize(records)))
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def cmd_experiment2(args) -> int:
    records = bench.run_experiment2(
        seed=args.seed, n_starts=args.starts, overrides=read_config(args.config) if args.config else None,
        out_path=args.out, timing=not args.no_timing,
    )  # fmt: skip
    print(bench.format_summary(bench.summarize(records)))
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def cmd_profile(args) -> int:
    records = bench.read_records(args.inp)
    table = bench.profile_from_records(records, args.metric, best_known=args.best_known, problem=args.problem, offset=args.offset)
    print(f"{'solver':<12} {'omega(1)':>9} {'omega(max)':>11}")
    for k, name in enumerate(table.solvers):
        print(f"{name:<12} {table.omega[k, 0]:>9.4f} {table.omega[k, -1]:>11.4f}")
    print(f"tau range: [1, {table.taus[-1]:.6g}] ({table.taus.size} points)")
    if args.out:
        table.write_csv(args.out)
    if args.svg:
        table.write_svg(args.svg, title=f"performance profile: {bench.Metric(args.metric).name.lower()}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nslm", description="Nonsmooth Levenberg-Marquardt methods for mixed complementarity systems.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def problem_args(sp):
        sp.add_argument("--problem", required=True, choices=PROBLEMS)
        sp.add_argument("--setting", choices=SETTINGS, default="para")
        sp.add_argument("--lambda", dest="lam", type=float, default=1.0, help="lambda of the para setting and of generated starts")
        sp.add_argument("--seed", type=int, default=0, help="data seed of the transport problem")

    sp = sub.add_parser("solve", help="run mixLM or FBLM from one start")
    problem_args(sp)
    sp.add_argument("--method", choices=("mix", "fb"), default="mix")
    sp.add_argument("--config", help="key=value parameter file")
    sp.add_argument("--param", action="append", type=_parse_param, metavar="KEY=VALUE", help="override one parameter (repeatable)")
    sp.add_argument("--start", type=parse_floats, help="full iterate or (x, y) with multipliers set to 1")
    sp.add_argument("--trace", help="write the iteration trace to this CSV")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("check", help="regularity diagnostics at a point")
    problem_args(sp)
    sp.add_argument("--point", required=True, type=parse_floats, help="full iterate (comma-separated)")
    sp.add_argument("--act-tol", type=float, default=1e-8)
    sp.add_argument("--rank-tol", type=float, default=1e-8)
    sp.add_argument("--samples", type=int, default=64, help="circle samples per biactive index")
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("experiment1", help="six methods on the 121-point grid of the Example-8 problem")
    sp.add_argument("--out", default="runs.csv")
    sp.add_argument("--config", help="key=value overrides of the experiment parameters")
    sp.add_argument("--no-timing", action="store_true", help="write time_sec as 0 for byte-reproducible output")
    sp.set_defaults(func=cmd_experiment1)

    sp = sub.add_parser("experiment2", help="six methods on the seeded inverse transportation problem")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--starts", type=int, default=500)
    sp.add_argument("--out", default="runs.csv")
    sp.add_argument("--config", help="key=value overrides of the experiment parameters")
    sp.add_argument("--no-timing", action="store_true", help="write time_sec as 0 for byte-reproducible output")
    sp.set_defaults(func=cmd_experiment2)

    sp = sub.add_parser("profile", help="performance profile from a runs CSV")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--metric", required=True, choices=[m.value for m in bench.Metric])
    sp.add_argument("--out", help="write tau and omega values to this CSV")
    sp.add_argument("--svg", help="write a step plot to this SVG file")
    sp.add_argument("--problem", choices=("example8", "transport"), default="example8", help="selects the reference objective")
    sp.add_argument("--best-known", type=float, help="reference objective (overrides --problem)")
    sp.add_argument("--offset", type=float, default=bench.DEFAULT_OFFSET)
    sp.set_defaults(func=cmd_profile)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"nslm: error: {exc}", file=sys.stderr)
        return EXIT_INCONCLUSIVE if args.command == "check" else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
