"""Command-line front end.

Exit codes: 0 success, 1 unsolvable, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import InconsistentRankError, classify
from .matrixkit import DEFAULT_TOL
from .problem import ProblemFileError, ProblemSpec, bundled_problem_path, load_problem
from .riccati import FiniteEscapeError, solve_P
from .simulator import (
    SimConfig,
    SimulationError,
    controller_from_synthesis,
    demo_intro,
    run_monte_carlo,
    schedule_controller,
    zero_controller,
)
from .solver import D4_TOL, DF7_TOL, GUARD_STEPS, synthesize

EXIT_OK, EXIT_UNSOLVABLE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class InputError(Exception):
    pass


def fmt(x) -> str:
    return format(float(x), ".17g")


def write_csv(path_or_buf, header: list[str], rows) -> None:
    own = not hasattr(path_or_buf, "write")
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    finally:
        if own:
            fh.close()


def _matrix_cols(prefix: str, r: int, c: int) -> list[str]:
    return [f"{prefix}_{i + 1}_{j + 1}" for i in range(r) for j in range(c)]


def _vec_cols(prefix: str, n: int) -> list[str]:
    return [f"{prefix}_{i + 1}" for i in range(n)]


def _rows(t, *blocks):
    flat = [np.asarray(b).reshape(len(t), -1) for b in blocks]
    return np.column_stack([t, *flat])


def _resolve_path(arg: str) -> Path:
    if arg.startswith("bundled:"):
        return bundled_problem_path(arg.split(":", 1)[1])
    return Path(arg)


def _load(arg: str) -> ProblemSpec:
    try:
        return load_problem(_resolve_path(arg))
    except FileNotFoundError as exc:
        raise InputError(f"cannot read problem file: {exc}") from None
    except ProblemFileError as exc:
        raise InputError(f"invalid problem file: {exc}") from None


def _parse_p1(text: str | None, n: int):
    if text is None:
        return None
    try:
        vals = [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise InputError(f"--p1-terminal: cannot parse {text!r}") from None
    if len(vals) == 1:
        return vals[0] * np.eye(n)
    if len(vals) != n * n:
        raise InputError(f"--p1-terminal needs 1 or {n * n} values, got {len(vals)}")
    return np.array(vals).reshape(n, n)


def _manifest(out: Path, command: str, argv, spec: ProblemSpec, args, outputs, seed=None) -> None:
    g = spec.grid
    doc = {
        "command": command,
        "argv": list(argv),
        "input": getattr(args, "problem", None),
        "tolerances": {"rank": args.tol, "constraint": D4_TOL, "closed_loop": DF7_TOL, "guard_steps": GUARD_STEPS},
        "seed": seed,
        "grid": {"t0": g.t0, "T": g.T, "steps": g.steps},
        "outputs": sorted(outputs),
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def cmd_classify(args, argv) -> int:
    spec = _load(args.problem)
    P = solve_P(spec, args.tol)
    rep = classify(spec, P, args.tol)
    print(rep.summary())
    return EXIT_OK


def _print_verdicts(syn) -> None:
    print(syn.regularity.summary())
    if syn.mode == "regular":
        print("branch: regular (feedback u = -R^+ B'P xhat)")
    else:
        if syn.P1 is not None:
            print(f"P1(T) = {np.array2string(syn.P1.terminal_value, precision=6)}")
            print(f"constraint: max ||C0 + B0'P1|| = {syn.P1.d4_residual:.3e}")
        if syn.open_loop is not None:
            ol = syn.open_loop
            print(f"open loop: Range P1(t0) in Range G1: {'yes' if ol.feasible else 'no'} (residual {ol.range_residual:.3e})")
        if syn.closed_loop is not None:
            cl = syn.closed_loop
            print(f"closed loop: max relative gain residual on [t0, T-eps] = {cl.df7_residual:.3e} (eps = {cl.epsilon_guard:.6g})")
        if syn.open_loop is not None or syn.closed_loop is not None:
            print(f"branch: {syn.mode} loop")
    if syn.solvable:
        print(f"optimal cost = {fmt(syn.optimal_cost)}")
    else:
        print(f"UNSOLVABLE: {syn.failure}")


def _write_solution(out: Path, syn) -> list[str]:
    spec, t = syn.spec, syn.spec.grid.nodes
    n, m = spec.n, spec.m
    files = []

    def emit(name, header, rows):
        write_csv(out / name, header, rows)
        files.append(name)

    emit("P.csv", ["t", *_matrix_cols("P", n, n)], _rows(t, syn.P.P))
    emit("filter.csv", ["t", *_matrix_cols("Phat", n, n), *_matrix_cols("L", n, spec.s)],
         _rows(t, syn.filter.Phat, syn.filter.L))
    if syn.P1 is not None:
        emit("P1.csv", ["t", *_matrix_cols("P1", n, n), "d4_residual"], _rows(t, syn.P1.P1, syn.P1.d4_residuals))
    if syn.regular is not None:
        r = syn.regular
        emit("regular.csv", ["t", *_matrix_cols("F", m, n), *_vec_cols("u", m), *_vec_cols("xbar", n)],
             _rows(t, r.F_schedule, r.u_schedule, r.xbar))
    if syn.open_loop is not None:
        ol = syn.open_loop
        w = ol.u1_schedule.shape[1]
        emit("open_loop.csv", ["t", *_vec_cols("u1", w), *_vec_cols("u", m), *_vec_cols("xbar", n)],
             _rows(t, ol.u1_schedule, ol.u_schedule, ol.xbar))
    if syn.closed_loop is not None:
        cl = syn.closed_loop
        w = cl.K_schedule.shape[1]
        res = np.zeros(len(t))
        res[: cl.guard_index + 1] = cl.df7_residuals
        emit("closed_loop.csv", ["t", *_matrix_cols("K", w, n), *_vec_cols("u", m), *_vec_cols("xbar", n),
                                 "df7_residual"],
             _rows(t, cl.K_schedule, cl.u_schedule, cl.xbar, res))
    return files


def cmd_solve(args, argv) -> int:
    spec = _load(args.problem)
    p1 = _parse_p1(args.p1_terminal, spec.n)
    syn = synthesize(spec, mode=args.mode, tol=args.tol, p1_terminal=p1)
    _print_verdicts(syn)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        files = _write_solution(out, syn)
        _manifest(out, "solve", argv, syn.spec, args, files)
    return EXIT_OK if syn.solvable else EXIT_UNSOLVABLE


def _load_schedule(path: str, spec: ProblemSpec) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read schedule {path}: {exc}") from None
    if data.shape != (spec.grid.steps + 1, spec.m + 1):
        raise InputError(f"schedule must have {spec.grid.steps + 1} rows of t,u_1..u_{spec.m}")
    return data[:, 1:]


SUMMARY_HEADER = ["modified_cost", "modified_se", "classic_cost", "classic_se",
                  "classic_terminal_cost", "classic_terminal_se", "constraint_residual", "constraint_se",
                  "trials", "seed"]


def summary_row(res) -> list:
    return [res.modified_cost, res.modified_se, res.classic_cost, res.classic_se,
            res.classic_terminal_cost, res.classic_terminal_se,
            res.terminal_constraint_residual, res.constraint_se, res.trials, res.seed]


def cmd_simulate(args, argv) -> int:
    spec = _load(args.problem)
    P1T = spec.p1_terminal
    filt = None
    if args.controller in ("zero", "custom"):
        if args.controller == "custom":
            if not args.schedule:
                raise InputError("--controller custom needs --schedule FILE")
            ctrl = schedule_controller(spec, _load_schedule(args.schedule, spec))
        else:
            ctrl = zero_controller(spec)
    else:
        mode = "auto" if args.controller == "auto" else args.controller
        syn = synthesize(spec, mode=mode, tol=args.tol, p1_terminal=_parse_p1(args.p1_terminal, spec.n))
        if not syn.solvable:
            print(f"UNSOLVABLE: {syn.failure}", file=sys.stderr)
            return EXIT_UNSOLVABLE
        ctrl = controller_from_synthesis(syn)
        filt = syn.filter
        P1T = syn.P1.terminal_value if syn.P1 is not None else None
    res = run_monte_carlo(spec, SimConfig(args.trials, args.seed, ctrl), filt, P1T)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "summary.csv", SUMMARY_HEADER, [summary_row(res)])
        write_csv(out / "mean_path.csv", ["t", *_vec_cols("xbar", spec.n), *_vec_cols("xhat", spec.n),
                                          *_vec_cols("u", spec.m)],
                  _rows(res.t, res.mean_x, res.mean_xhat, res.mean_u))
        _manifest(out, "simulate", argv, spec, args, ["summary.csv", "mean_path.csv"], seed=args.seed)
    else:
        buf = io.StringIO()
        write_csv(buf, SUMMARY_HEADER, [summary_row(res)])
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_demo_intro(args, argv) -> int:
    rep = demo_intro(T=args.T, trials=args.trials, seed=args.seed, steps=args.steps)
    print(f"dx = u dt + dw on [0, {args.T:g}], u = -x0/T, {args.trials} trials, seed {args.seed}")
    print(rep.table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irlqg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"irlqg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def problem_cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("problem", help="problem JSON file, or bundled:NAME (e.g. bundled:intro_scalar)")
        sp.add_argument("--tol", type=float, default=DEFAULT_TOL, help="relative rank tolerance")
        return sp

    problem_cmd("classify", "regular/irregular verdict").set_defaults(func=cmd_classify)

    sp = problem_cmd("solve", "synthesize the controller and write CSV tables")
    sp.add_argument("--mode", choices=("open", "closed", "auto"), default="auto")
    sp.add_argument("--p1-terminal", help="P1(T): one value (times I) or n*n comma-separated values")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_solve)

    sp = problem_cmd("simulate", "Monte Carlo evaluation of a controller")
    sp.add_argument("--trials", type=int, default=10_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--controller", choices=("auto", "open", "closed", "zero", "custom"), default="auto")
    sp.add_argument("--schedule", help="CSV with columns t,u_1..u_m for --controller custom")
    sp.add_argument("--p1-terminal")
    sp.add_argument("--out", help="output directory (summary printed to stdout if omitted)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("demo-intro", help="classic vs mean-terminal cost on dx = u dt + dw")
    sp.add_argument("--T", type=float, default=1.0)
    sp.add_argument("--trials", type=int, default=10_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps", type=int, default=1000)
    sp.set_defaults(func=cmd_demo_intro)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, argv)
    except (InputError, InconsistentRankError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FiniteEscapeError, SimulationError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
