"""Command-line interface: thin adapters from instance files to library calls.

Every subcommand prints a JSON report on standard output and, with
``--out DIR``, also writes JSON, CSV and PNG files into ``DIR``. Agent indices
in all outputs are zero-based.

Exit codes: 0 on success, 1 when an invariant or precondition check fails,
2 on usage errors (including unreadable instance files).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import serialize
from .config import DEFAULT_CONFIG, Config
from .dist import UtilityProfile, load_instance
from .errors import PromiseLedgerError
from .geometry import (
    BallQuery,
    DominantAgent,
    Hierarchy,
    agent_sets,
    ball_in_ustar,
    classify_trivial,
    no_info_value,
    support_value,
    support_value_enumerate,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
PK_TOL, SLACK_TOL, IC_TOL = 1e-9, -1e-9, 1e-8


class UsageError(Exception):
    """Invalid command-line input (exit code 2)."""


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------


def parse_floats(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def parse_consts(items: Sequence[str] | None) -> tuple[Config, dict[str, str]]:
    """Split ``KEY=VAL`` overrides into config fields and builder options."""
    cfg_over: dict[str, str] = {}
    extra: dict[str, str] = {}
    builder_keys = {"C", "variant", "r0_sweep", "depth"}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--const expects KEY=VAL, got {item!r}")
        key, val = item.split("=", 1)
        key = key.strip()
        if key in builder_keys:
            extra[key] = val.strip()
        else:
            cfg_over[key] = val.strip()
    try:
        cfg = DEFAULT_CONFIG.with_overrides(cfg_over)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg, extra


def margin_option(extra: dict[str, str]) -> float | str | None:
    val = extra.get("C")
    if val is None:
        return None
    if val == "measured":
        return val
    try:
        return float(val)
    except ValueError as exc:
        raise UsageError(f"C must be a number or 'measured', got {val!r}") from exc


def load_profile(path: str | None, beta: list[float] | None = None) -> UtilityProfile:
    if path is None:
        raise UsageError("--instance is required")
    try:
        return load_instance(path)
    except FileNotFoundError as exc:
        raise UsageError(f"instance file not found: {path}") from exc
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read instance {path}: {exc}") from exc


def require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required for this subcommand")
    return value


def write_outputs(out: str | None, files: dict[str, str]) -> None:
    if out is None:
        return
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (d / name).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# Reports (library calls only)
# ---------------------------------------------------------------------------


def ball_verdict(profile: UtilityProfile, x, r: float) -> dict[str, Any]:
    """Membership verdict of ``B(x, r)`` in U* with its certified slack."""
    v = ball_in_ustar(profile, BallQuery(tuple(x), r))
    if v.inside:
        return {"center": x, "radius": r, "inside": True, "slack": v.min_margin}
    return {"center": x, "radius": r, "inside": False, "slack": v.slack, "witness": v.witness}


def check_report(profile: UtilityProfile, ball: tuple | None = None) -> dict[str, Any]:
    """Structural classification of an instance, plus an optional ball verdict."""
    from .rates import sc3_partition
    from .realize import one_shot_optimum

    sets = agent_sets(profile)
    trivial = classify_trivial(profile)
    case = trivial.case
    if isinstance(case, DominantAgent):
        cls: Any = {"case": "dominant", "agent": case.agent}
    elif isinstance(case, Hierarchy):
        cls = {"case": "hierarchy", "order": list(case.order), "thresholds": list(case.thresholds)}
    else:
        cls = None
    alpha = profile.alpha_array
    return {
        "indexing": "0-based",
        "n": profile.n,
        "means": profile.means,
        "alpha": alpha,
        "classification": cls,
        "I": list(sets.I),
        "J": list(sets.J),
        "K": list(sets.K),
        "I_tilde": list(sets.I_tilde),
        "support_value": support_value(profile, alpha),
        "no_info_value": no_info_value(profile, alpha),
        "one_shot_value": one_shot_optimum(profile).value,
        "sc3_partition": sc3_partition(profile),
        "ball": None if ball is None else ball_verdict(profile, *ball),
    }


def frontier_report(profile: UtilityProfile, beta: list[float]) -> dict[str, Any]:
    from .realize import UniformSplit, first_best_table, realized_utilities

    b = np.asarray(beta, dtype=float)
    if b.shape != (profile.n,):
        raise UsageError("--beta needs one entry per agent")
    if np.any(b < 0) or not np.any(b > 0):
        raise UsageError("--beta must be nonnegative and nonzero")
    table = first_best_table(profile, b, UniformSplit())
    return {
        "indexing": "0-based",
        "beta": b,
        "support_value": support_value(profile, b),
        "support_value_enumerate": support_value_enumerate(profile, b),
        "first_best_vector": realized_utilities(table),
    }


def verifier_states(mech, samples: int = 8) -> list:
    """Boundary states on every grid direction plus scaled interior states."""
    states = [mech.boundary_state(d) for d in mech.grid]
    for k in range(0, mech.grid.shape[0], max(1, mech.grid.shape[0] // samples)):
        for t in (0.25, 0.75):
            U = mech.x + t * mech.r * mech.grid[k]
            states.append(mech.decompose(U))
            states.append(mech.decompose(t * U))
    return states


def mechanism_report(profile: UtilityProfile, x, r: float, delta: float, gamma: float,
                     C: float | str | None, variant: str, cfg: Config) -> dict[str, Any]:
    from .mechanism import (
        build_ball_mechanism,
        safe_margin_bounds,
        verify_ic,
        verify_promise_keeping,
        verify_valid_promises,
    )
    from .sim import exact_region_gap

    mech = build_ball_mechanism(profile, x, r, delta, gamma, C=C, variant=variant, config=cfg)
    states = verifier_states(mech)
    pk = max(verify_promise_keeping(mech, s) for s in states)
    slack = min(verify_valid_promises(mech, s) for s in states)
    ic = max(verify_ic(mech, s) for s in states)
    lo, hi = safe_margin_bounds(r, gamma, mech.C)
    return {
        "x": mech.x,
        "r": mech.r,
        "delta": mech.delta,
        "gamma": mech.gamma,
        "C": mech.C,
        "margin_interval": [lo, hi],
        "variant": variant,
        "directions": int(mech.grid.shape[0]),
        "states_checked": len(states),
        "promise_keeping": pk,
        "valid_promises_slack": slack,
        "ic_gain": ic,
        "region_gap": exact_region_gap(mech),
        "pass": bool(pk <= PK_TOL and slack >= SLACK_TOL and ic <= IC_TOL),
    }


def simulate_report(profile: UtilityProfile, x, r: float, delta: float, gamma: float | None,
                    horizon: int | None, episodes: int, seed: int, C: float | str | None,
                    variant: str, cfg: Config):
    from .mechanism import build_ball_mechanism, finite_horizon_schedule
    from .sim import run_discounted, run_finite

    if horizon is not None:
        Cv = None if C is None else float(C)
        sch = None if horizon == 1 else finite_horizon_schedule(profile, x, r, delta, horizon, C=Cv,
                                                                config=cfg)
        trace = run_finite(sch, horizon, episodes, seed, profile=profile)
        tol = 3 * trace.stderr
    else:
        mech = build_ball_mechanism(profile, x, r, delta, gamma, C=C, variant=variant, config=cfg)
        trace = run_discounted(mech, gamma, episodes, seed, config=cfg)
        tol = 3 * trace.stderr + trace.tail_bound
    within = bool(np.all(np.abs(trace.means - trace.target) <= tol))
    report = {
        "episodes": trace.episodes,
        "rounds": trace.rounds,
        "seed": seed,
        "means": trace.means,
        "stderr": trace.stderr,
        "tail_bound": trace.tail_bound,
        "target": trace.target,
        "welfare": trace.welfare,
        "gap": trace.gap,
        "exact_gap": trace.exact_gap,
        "within_3se": within,
    }
    return report, trace


def default_gammas() -> list[float]:
    return [1 - 2.0 ** -k for k in range(4, 11)]


def sweep_result(profile: UtilityProfile, policy: str, gammas, horizons, C, r0: float):
    from .sim import SweepConfig, sweep

    if policy == "finite":
        params = tuple(float(T) for T in (horizons or [100, 178, 316, 562, 1000, 1778, 3162, 5623, 10000]))
    else:
        params = tuple(gammas or default_gammas())
    cfg = SweepConfig(kind=policy, params=params, C="auto" if C is None else C, r0=r0)
    return sweep(profile, cfg)


def sweep_report(result) -> dict[str, Any]:
    rep = result.report
    return {"slope": rep.slope, "intercept": rep.intercept, "residual": rep.residual,
            "params": rep.params, "gaps": rep.gaps, "rows": list(result.rows)}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_check(args, cfg, extra) -> int:
    profile = load_profile(args.instance)
    ball = None
    if args.x is not None or args.r is not None:
        x = parse_floats(require(args.x, "--x"))
        if len(x) != profile.n:
            raise UsageError("--x needs one entry per agent")
        r = require(args.r, "--r")
        if not r > 0:
            raise UsageError("--r must be positive")
        ball = (x, float(r))
    report = check_report(profile, ball)
    sys.stdout.write(serialize.dumps(report))
    write_outputs(args.out, {"check.json": serialize.dumps(report)})
    return EXIT_OK


def cmd_frontier(args, cfg, extra) -> int:
    profile = load_profile(args.instance)
    beta = parse_floats(args.beta) or list(profile.alpha)
    report = frontier_report(profile, beta)
    sys.stdout.write(serialize.dumps(report))
    if args.out:
        from .realize import UniformSplit, first_best_table, table_to_csv

        write_outputs(args.out, {"frontier.json": serialize.dumps(report),
                                 "table.csv": table_to_csv(first_best_table(profile, np.asarray(beta),
                                                                            UniformSplit()))})
        if profile.n == 2:
            from .plotting import plot_region

            vec = np.asarray(report["first_best_vector"])
            plot_region(profile, vec, 1e-3, Path(args.out) / "frontier.png")
    return EXIT_OK


def _ball_args(args, profile):
    x = parse_floats(require(args.x, "--x"))
    if len(x) != profile.n:
        raise UsageError("--x needs one entry per agent")
    r = require(args.r, "--r")
    delta = require(args.delta, "--delta")
    return np.asarray(x), float(r), float(delta)


def cmd_mechanism(args, cfg, extra) -> int:
    profile = load_profile(args.instance)
    x, r, delta = _ball_args(args, profile)
    gamma = require(args.gamma, "--gamma")
    gamma = parse_floats(gamma)[0]
    report = mechanism_report(profile, x, r, delta, gamma, margin_option(extra),
                              extra.get("variant", "new"), cfg)
    text = serialize.dumps(report)
    sys.stdout.write(text)
    write_outputs(args.out, {"mechanism.json": text})
    if args.out and profile.n == 2:
        from .plotting import plot_region

        plot_region(profile, x, r, Path(args.out) / "mechanism.png", margin=delta)
    return EXIT_OK if report["pass"] else EXIT_FAIL


def cmd_simulate(args, cfg, extra) -> int:
    profile = load_profile(args.instance)
    x, r, delta = _ball_args(args, profile)
    horizon = parse_floats(args.horizon)[0] if args.horizon else None
    gamma = parse_floats(args.gamma)[0] if args.gamma else None
    if horizon is None and gamma is None:
        raise UsageError("simulate needs --gamma or --horizon")
    report, trace = simulate_report(profile, x, r, delta, gamma, None if horizon is None else int(horizon),
                                    args.episodes, args.seed, margin_option(extra),
                                    extra.get("variant", "new"), cfg)
    text = serialize.dumps(report)
    sys.stdout.write(text)
    if args.out:
        cols = [f"agent{i}" for i in range(profile.n)]
        rows = [{c: float(v) for c, v in zip(cols, row)} for row in trace.totals]
        write_outputs(args.out, {"simulate.json": text, "totals.csv": serialize.rows_to_csv(rows, cols)})
        from .plotting import plot_totals

        plot_totals(trace.totals, trace.target, Path(args.out) / "totals.png")
    return EXIT_OK if report["within_3se"] else EXIT_FAIL


def _sweep_like(args, extra, name: str) -> int:
    profile = load_profile(args.instance)
    policy = args.policy
    C = margin_option(extra)
    if C == "measured":
        raise UsageError("sweeps take a numeric C or the default")
    r0 = float(extra.get("r0_sweep", 0.1))
    result = sweep_result(profile, policy, parse_floats(args.gamma), parse_floats(args.horizon), C, r0)
    report = sweep_report(result)
    text = serialize.dumps(report)
    sys.stdout.write(text)
    if args.out:
        write_outputs(args.out, {f"{name}.json": text, f"{name}.csv": result.csv()})
        from .plotting import plot_rate_functions, plot_sweep

        xlabel = "T" if policy == "finite" else "1 - gamma"
        plot_sweep(result.report.params, result.report.gaps, result.report.slope, result.report.intercept,
                   Path(args.out) / f"{name}.png", xlabel=xlabel)
        if name == "rates":
            from .rates import eta_grid, f_partition, g_i, sc3_partition

            etas = eta_grid(64)
            curves = {f"g_{i}": g_i(profile, i, etas) for i in range(profile.n)}
            part = sc3_partition(profile)
            if part is not None:
                curves["f"] = f_partition(profile, part, etas)
            plot_rate_functions(etas, curves, Path(args.out) / "rate_functions.png")
    return EXIT_OK


def cmd_rates(args, cfg, extra) -> int:
    return _sweep_like(args, extra, "rates")


def cmd_sweep(args, cfg, extra) -> int:
    return _sweep_like(args, extra, "sweep")


COMMANDS = {
    "check": cmd_check,
    "frontier": cmd_frontier,
    "mechanism": cmd_mechanism,
    "simulate": cmd_simulate,
    "rates": cmd_rates,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promise-ledger",
                                     description="Promised-utility mechanisms without money.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--instance", help="instance JSON file")
        p.add_argument("--out", help="directory for JSON, CSV and PNG outputs")
        p.add_argument("--const", action="append", metavar="KEY=VAL",
                       help="override a constant (config fields, C, variant)")
        if name == "frontier":
            p.add_argument("--beta", help="direction, comma separated")
        if name in ("check", "mechanism", "simulate"):
            p.add_argument("--x", help="ball center, comma separated")
            p.add_argument("--r", type=float, help="ball radius")
            if name != "check":
                p.add_argument("--delta", type=float, help="margin")
        if name in ("mechanism", "simulate", "rates", "sweep"):
            p.add_argument("--gamma", help="discount factor (comma list for sweeps)")
        if name in ("simulate", "rates", "sweep"):
            p.add_argument("--horizon", help="horizon T (comma list for sweeps)")
        if name == "simulate":
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--episodes", type=int, default=10_000)
        if name in ("rates", "sweep"):
            p.add_argument("--policy", choices=["universal", "sc1", "finite"],
                           default="universal")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        cfg, extra = parse_consts(args.const)
        return COMMANDS[args.command](args, cfg, extra)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except PromiseLedgerError as exc:
        sys.stderr.write(f"check failed: {type(exc).__name__}: {exc}\n")
        return EXIT_FAIL
    except ValueError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
