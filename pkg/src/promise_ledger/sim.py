"""Simulated play, welfare gaps, deviation search and parameter sweeps.

Monte Carlo runs are vectorized over episodes. Randomness is counter based:
the uniforms of round ``t`` for the episode chunk ``c`` come from a Philox
generator keyed by ``(seed, t, c)``, so serial and threaded runs produce
identical numbers. Rewards are credited as expected utilities
``u_i * p_i`` given the drawn utilities and the fractional allocation.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .config import DEFAULT_CONFIG, Config, worker_count
from .dist import UtilityProfile, sample_index
from .errors import GridTooLarge, ScheduleInfeasible
from .geometry import support_value
from .mechanism import (
    BallMechanism,
    FiniteHorizonMechanism,
    FiniteHorizonSchedule,
    PromiseState,
    StationaryMechanism,
    build_ball_mechanism,
    finite_horizon_schedule,
    region_gap,
)
from .rates import RateReport, f_partition, fit_rate, predicted_eta, running_slopes
from .realize import UniformSplit, first_best_table, one_shot_optimum, realized_utilities

CHUNK = 1024


# ---------------------------------------------------------------------------
# Strategies and traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Truthful:
    """Every agent reports its true utility."""


@dataclass(frozen=True)
class Deviator:
    """Agent ``agent`` reports atom ``report_map[k]`` when its true atom is ``k``."""

    agent: int
    report_map: tuple[int, ...]


Strategy = Union[Truthful, Deviator]


def _reports(profile: UtilityProfile, idx: np.ndarray, strategy: Strategy) -> np.ndarray:
    if isinstance(strategy, Truthful):
        return idx
    mapping = np.asarray(strategy.report_map, dtype=np.int64)
    if mapping.shape[0] != profile.dists[strategy.agent].size:
        raise ValueError("report map needs one entry per atom")
    out = idx.copy()
    out[:, strategy.agent] = mapping[idx[:, strategy.agent]]
    return out


@dataclass(frozen=True)
class SimulationTrace:
    """Summary of simulated play.

    Attributes
    ----------
    means : per-agent mean (discounted or averaged) utility.
    stderr : per-agent standard errors of the means.
    tail_bound : analytic bound on the truncated tail (0 for finite runs).
    target : exact promised utility of the initial state.
    welfare : ``alpha^T means``.
    gap : ``support_value(alpha) - welfare``.
    exact_gap : ``support_value(alpha) - alpha^T target``.
    episodes, rounds : run sizes.
    totals : per-episode per-agent totals (episode order).
    records : per-round records of the first episode when requested.
    """

    means: np.ndarray
    stderr: np.ndarray
    tail_bound: float
    target: np.ndarray
    welfare: float
    gap: float
    exact_gap: float
    episodes: int
    rounds: int
    totals: np.ndarray = field(repr=False)
    records: tuple = field(default=(), repr=False)


@dataclass(frozen=True)
class RoundRecord:
    """One round of one episode."""

    round: int
    reports: np.ndarray
    utilities: np.ndarray
    allocation: np.ndarray
    state: np.ndarray


def discounted_total(records: Sequence[RoundRecord], gamma: float) -> np.ndarray:
    """``(1 - gamma) sum_t gamma^(t-1) u_i(t) p_i(t)`` recomputed from records."""
    if gamma == 0:
        return records[0].utilities * records[0].allocation
    terms = [(1 - gamma) * gamma ** rec.round * rec.utilities * rec.allocation for rec in records]
    return np.sum(terms, axis=0)


def truncation_rounds(gamma: float, eps: float = DEFAULT_CONFIG.truncation_eps) -> int:
    """Smallest ``t_max`` with ``gamma^t_max <= eps`` (1 when ``gamma = 0``)."""
    if gamma <= 0:
        return 1
    return max(1, int(math.ceil(math.log(eps) / math.log(gamma))))


def _uniforms(seed: int, t: int, chunk: int, size: int, n: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), (t << 32) | chunk]))
    return gen.random((size, n))


def _draw(profile: UtilityProfile, seed: int, t: int, chunk: int, size: int) -> np.ndarray:
    u = _uniforms(seed, t, chunk, size, profile.n)
    idx = np.empty(u.shape, dtype=np.int64)
    for i, d in enumerate(profile.dists):
        idx[:, i] = sample_index(d, u[:, i])
    return idx


def _chunks(episodes: int) -> list[tuple[int, int, int]]:
    return [(c, c * CHUNK, min(episodes, (c + 1) * CHUNK)) for c in range((episodes + CHUNK - 1) // CHUNK)]


def _run_chunks(fn: Callable[[int, int, int], np.ndarray], episodes: int,
                threads: int | None) -> np.ndarray:
    chunks = _chunks(episodes)
    workers = worker_count() if threads is None else max(1, threads)
    if workers == 1 or len(chunks) == 1:
        parts = [fn(*c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: fn(*c), chunks))
    return np.concatenate(parts, axis=0)


def _summary(profile: UtilityProfile, totals: np.ndarray, target: np.ndarray, tail: float,
             rounds: int, records=()) -> SimulationTrace:
    E = totals.shape[0]
    means = totals.sum(axis=0) / E
    stderr = totals.std(axis=0, ddof=1) / math.sqrt(E) if E > 1 else np.full(profile.n, np.inf)
    alpha = profile.alpha_array
    sigma = support_value(profile, alpha)
    welfare = float(alpha @ means)
    return SimulationTrace(means=means, stderr=stderr, tail_bound=tail, target=np.asarray(target),
                           welfare=welfare, gap=sigma - welfare,
                           exact_gap=sigma - float(alpha @ target), episodes=E, rounds=rounds,
                           totals=totals, records=tuple(records))


def run_discounted(mech, gamma: float, episodes: int, seed: int, strategy: Strategy = Truthful(),
                   state: PromiseState | None = None, *, config: Config = DEFAULT_CONFIG,
                   threads: int | None = None, record: bool = False) -> SimulationTrace:
    """Monte Carlo estimate of discounted utilities under ``strategy``.

    Play is truncated after ``t_max`` rounds with ``gamma^t_max <= eps``; the
    dropped tail is at most ``vbar gamma^t_max`` and is reported as
    ``tail_bound``. ``gamma = 0`` plays a single round.
    """
    profile = mech.profile
    if state is None:
        state = mech.default_state() if isinstance(mech, BallMechanism) else mech.decompose(None)
    t_max = truncation_rounds(gamma, config.truncation_eps)
    tail = profile.vbar * gamma ** t_max if gamma > 0 else 0.0
    U0 = np.asarray(state.U, dtype=float)

    def chunk(c: int, lo: int, hi: int) -> np.ndarray:
        size = hi - lo
        U = np.tile(U0, (size, 1))
        total = np.zeros((size, profile.n))
        batch = mech.decompose_batch(U)
        for t in range(t_max):
            idx = _draw(profile, seed, t, c, size)
            rep = _reports(profile, idx, strategy)
            alloc, nxt = mech.respond_batch(batch, rep)
            vals = np.column_stack([profile.dists[i].atom_array[idx[:, i]] for i in range(profile.n)])
            weight = 1.0 if gamma == 0 else (1 - gamma) * gamma ** t
            total += weight * vals * alloc
            if t + 1 < t_max:
                batch = mech.decompose_batch(nxt)
        return total

    totals = _run_chunks(chunk, episodes, threads)
    records = trace_episode(mech, state, gamma, min(t_max, 50), seed) if record else ()
    return _summary(profile, totals, U0, tail, t_max, records)


def trace_episode(mech, state: PromiseState, gamma: float, rounds: int, seed: int,
                  strategy: Strategy = Truthful()) -> list[RoundRecord]:
    """Per-round records of episode 0 (same draws as :func:`run_discounted`)."""
    profile = mech.profile
    batch = mech.decompose_batch(np.asarray(state.U)[None])
    out = []
    for t in range(rounds):
        idx = _draw(profile, seed, t, 0, 1)
        rep = _reports(profile, idx, strategy)
        alloc, nxt = mech.respond_batch(batch, rep)
        vals = np.array([profile.dists[i].atom_array[idx[0, i]] for i in range(profile.n)])
        out.append(RoundRecord(round=t, reports=rep[0].copy(), utilities=vals, allocation=alloc[0].copy(),
                               state=batch.U[0].copy()))
        batch = mech.decompose_batch(nxt)
    return out


def run_finite(schedule: FiniteHorizonSchedule | None, T: int, episodes: int, seed: int, *,
               profile: UtilityProfile | None = None, mechanism: FiniteHorizonMechanism | None = None,
               threads: int | None = None) -> SimulationTrace:
    """Monte Carlo average utilities over ``T`` rounds of the schedule's mechanism.

    ``T = 1`` plays the optimal one-shot incentive-compatible table.
    """
    if T == 1:
        prof = profile if profile is not None else schedule.profile
        opt = one_shot_optimum(prof)
        mech = StationaryMechanism(prof, opt.table, 0.0)
        return run_discounted(mech, 0.0, episodes, seed, threads=threads)
    if schedule is None or schedule.T != T:
        raise ValueError("schedule must be built for the requested horizon")
    fmech = mechanism if mechanism is not None else FiniteHorizonMechanism(schedule)
    prof = schedule.profile
    state = fmech.initial_state()
    U0 = np.asarray(state.U, dtype=float)

    def chunk(c: int, lo: int, hi: int) -> np.ndarray:
        size = hi - lo
        U = np.tile(U0, (size, 1))
        total = np.zeros((size, prof.n))
        for step_no, t in enumerate(range(T, 0, -1)):
            mech = fmech.round(t)
            batch = mech.decompose_batch(U)
            idx = _draw(prof, seed, step_no, c, size)
            alloc, U = mech.respond_batch(batch, idx)
            vals = np.column_stack([prof.dists[i].atom_array[idx[:, i]] for i in range(prof.n)])
            total += vals * alloc / T
        return total

    totals = _run_chunks(chunk, episodes, threads)
    return _summary(prof, totals, U0, 0.0, T)


# ---------------------------------------------------------------------------
# Exact gaps and accounting
# ---------------------------------------------------------------------------


def exact_region_gap(mech) -> float:
    """``support_value(alpha) - max(no_info_value(alpha), alpha^T x + r |alpha|)``.

    Accepts a ball mechanism or a finite-horizon schedule (whose final ball is
    ``B(x^(T), r_T)``).
    """
    if isinstance(mech, FiniteHorizonSchedule):
        if mech.T <= mech.T0:
            return support_value(mech.profile, mech.profile.alpha_array) - one_shot_optimum(mech.profile).value
        return region_gap(mech.profile, mech.centers[mech.T], float(mech.radii[mech.T]))
    return region_gap(mech.profile, mech.x, mech.r)


def welfare_accounting(mech, state: PromiseState) -> dict[str, float]:
    """Exact welfare of ``state`` and its regret against first best."""
    alpha = mech.profile.alpha_array
    first_best = support_value(mech.profile, alpha)
    welfare = float(alpha @ np.asarray(state.U))
    return {"welfare": welfare, "regret": first_best - welfare, "first_best": first_best}


# ---------------------------------------------------------------------------
# Dynamic deviation search
# ---------------------------------------------------------------------------


def report_maps(size: int) -> list[tuple[int, ...]]:
    """All atom-to-atom maps of a support of ``size`` atoms."""
    import itertools

    return [tuple(m) for m in itertools.product(range(size), repeat=size)]


def _grid_member(mech, U: np.ndarray) -> np.ndarray:
    """Rows of ``U`` decomposable over the grid generators or the NI region."""
    E = mech.profile.means
    nonneg = np.all(U >= -1e-15, axis=1)
    inside = nonneg & (np.sum(np.clip(U, 0, None) / E, axis=1) <= 1 + 1e-12)
    if isinstance(mech, BallMechanism) and mech.grid.shape[0] > 0:
        inside |= nonneg & np.isfinite(mech._grid_q0(np.clip(U, 0.0, None))).any(axis=1)
    return inside


def _project_into_region(mech, U: np.ndarray, steps: int = 50) -> np.ndarray:
    """Pull rows of ``U`` toward the ball center until the grid generators cover them."""
    U = np.clip(np.atleast_2d(U), 0.0, None)
    out = U.copy()
    bad = np.nonzero(~_grid_member(mech, U))[0]
    if bad.size == 0:
        return out
    center = getattr(mech, "x", np.zeros(U.shape[1]))
    lo, hi = np.zeros(bad.size), np.ones(bad.size)
    diff = U[bad] - center
    for _ in range(steps):
        mid = (lo + hi) / 2
        ok = _grid_member(mech, center + mid[:, None] * diff)
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    out[bad] = center + lo[:, None] * diff
    return out


def best_response_search(mech, state: PromiseState, agent: int, grid: Sequence[Sequence[int]] | None = None,
                         *, depth: int = 3, cap: int = 2_000_000,
                         on_escape: str = "raise") -> float:
    """Best dynamic gain of agent ``agent`` from a stationary misreport map.

    The agent deviates with each map for ``depth`` rounds and reports
    truthfully afterwards; its continuation after the deviation is the
    promised utility of the state reached. Values are exact expectations
    over the full tree of joint outcomes. The gain is measured against the
    same computation with the identity map.

    Parameters
    ----------
    grid : report maps to try (default: every atom-to-atom map).
    on_escape : "raise" or "project". With "project", promises that fall
        outside the region are pulled back toward the ball center, which
        models a mechanism that cannot honor them.

    Raises
    ------
    GridTooLarge
        When ``len(grid) * N^depth`` exceeds ``cap``.
    """
    profile = mech.profile
    gamma = mech.gamma
    size = profile.dists[agent].size
    maps = report_maps(size) if grid is None else [tuple(m) for m in grid]
    identity = tuple(range(size))
    if identity not in maps:
        maps = [identity] + maps
    joint = profile.joint()
    N = joint.size
    if len(maps) * N ** depth > cap:
        raise GridTooLarge(f"{len(maps)} maps x {N}^{depth} leaves exceeds cap {cap}")

    def value(mapping: tuple[int, ...]) -> float:
        strategy = Deviator(agent, mapping)
        states = np.asarray(state.U, dtype=float)[None]
        probs = np.ones(1)
        total = 0.0
        for t in range(depth):
            batch = mech.decompose_batch(states)
            L = states.shape[0]
            idx = np.tile(joint.index, (L, 1))
            rows = np.repeat(np.arange(L), N)
            sub = type(batch)(U=batch.U[rows], s=batch.s[rows], q=batch.q[rows], q0=batch.q0[rows],
                              ids=batch.ids[rows])
            alloc, nxt = mech.respond_batch(sub, _reports(profile, idx, strategy))
            p = probs[rows] * np.tile(joint.probs, L)
            vals = np.tile(joint.values[:, agent], L)
            total += (1 - gamma) * gamma ** t * float(p @ (vals * alloc[:, agent]))
            if on_escape == "project":
                nxt = _project_into_region(mech, nxt)
            states, probs = nxt, p
        return total + gamma ** depth * float(probs @ states[:, agent])

    base = value(identity)
    best = max(value(m) for m in maps)
    return best - base


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepConfig:
    """Parameters of a rate sweep.

    Attributes
    ----------
    kind : "universal", "sc1" or "finite".
    params : discount factors (``kind != "finite"``) or horizons.
    C : constant of the margin chain, or "auto" for the scaled default of the
        policy.
    r0 : fixed table radius for "sc1" sweeps.
    seeds, episodes : optional Monte Carlo cross-check (0 episodes skips it).
    truncation_eps : truncation rule of discounted runs.
    offset : inward shift of tangent balls so containment holds with slack.
    """

    kind: str
    params: tuple[float, ...]
    C: float | str = "auto"
    r0: float = 0.1
    seeds: tuple[int, ...] = (0,)
    episodes: int = 0
    truncation_eps: float = DEFAULT_CONFIG.truncation_eps
    offset: float = 1e-5


@dataclass(frozen=True)
class SweepResult:
    report: RateReport
    rows: tuple[dict, ...]

    def csv(self) -> str:
        from .serialize import rows_to_csv

        return rows_to_csv(list(self.rows), ["gamma_or_T", "gap", "eta_star", "f_at_eta", "slope_running"])


def optimal_vector(profile: UtilityProfile, alpha=None) -> np.ndarray:
    """An alpha-optimal vector of U* (first best with uniform tie splitting)."""
    a = profile.alpha_array if alpha is None else np.asarray(alpha, dtype=float)
    return realized_utilities(first_best_table(profile, a, UniformSplit()))


def universal_policy(profile: UtilityProfile, gamma: float, C: float) -> tuple[np.ndarray, float, float]:
    """Ball ``x = U_opt - 2 r 1`` with ``r = delta = sqrt(C (1 - gamma) / gamma)``."""
    r = math.sqrt(C * (1 - gamma) / gamma)
    x = optimal_vector(profile) - 2 * r * np.ones(profile.n)
    return x, r, r


def universal_auto_C(profile: UtilityProfile, gamma_min: float) -> float:
    """Scaled constant putting ``r`` at half its largest feasible value at ``gamma_min``."""
    r_max = float(np.min(optimal_vector(profile))) / 4
    r = r_max / 2
    return r * r * gamma_min / (1 - gamma_min)


def sc1_policy(profile: UtilityProfile, gamma: float, C: float, r0: float,
               offset: float) -> tuple[np.ndarray, float, float]:
    """Tangent table ball of fixed radius ``r0`` with ``delta (r0 - delta) = C (1 - gamma)/gamma``."""
    a = profile.alpha_array
    ahat = a / np.linalg.norm(a)
    target = C * (1 - gamma) / gamma
    disc = r0 * r0 - 4 * target
    if disc < 0:
        raise ValueError("margin chain has no solution for this gamma")
    delta = (r0 - math.sqrt(disc)) / 2
    x = optimal_vector(profile) - (r0 + offset) * ahat
    return x, r0 - delta, delta


def sc1_auto_C(gamma_min: float, r0: float) -> float:
    delta = r0 / 8
    return delta * (r0 - delta) * gamma_min / (1 - gamma_min)


def finite_policy(profile: UtilityProfile, T: int, *, offset: float = 1e-5, config: Config = DEFAULT_CONFIG,
                  check_balls: bool = True, C: float | None = None) -> FiniteHorizonSchedule:
    """Finite-horizon schedule with ``r = r0 / 2``.

    The table ball is tangent to U* along alpha at the optimal vector (shifted
    inward by ``offset``) and ``delta`` is the smallest value satisfying both
    the constraint chain and the drift bound ``|x^(T) - x| <= delta / 2``.
    ``C`` defaults to the scaled constant ``r^2 / c0`` (so ``C_tilde = r^2``),
    which fixes the shape of the schedule but not the validity of every
    round's promises; pass a measured constant for simulated play.
    """
    r0 = config.r0 if config.r0 is not None else float(np.min(profile.means)) / (12 * profile.n)
    r = r0 / 2
    if C is None:
        C = r * r / config.c0
    a = profile.alpha_array
    ahat = a / np.linalg.norm(a)
    U_opt = optimal_vector(profile)

    def attempt(delta: float, balls: bool) -> FiniteHorizonSchedule | None:
        x = U_opt - (r + delta + offset) * ahat
        try:
            sch = finite_horizon_schedule(profile, x, r, delta, T, C=C, r0=r0, check_balls=balls,
                                          config=config)
        except Exception:
            return None
        return sch if sch.drift <= delta / 2 else None

    lo, hi = 0.0, r
    if attempt(hi, False) is None:
        raise ScheduleInfeasible(f"no feasible margin for T={T}", 1)
    for _ in range(60):
        mid = (lo + hi) / 2
        if attempt(mid, False) is None:
            lo = mid
        else:
            hi = mid
    sch = attempt(hi, check_balls)
    if sch is None:
        raise ScheduleInfeasible(f"schedule for T={T} failed its ball checks", 1)
    return sch


def sweep(profile: UtilityProfile, config: SweepConfig) -> SweepResult:
    """Exact region gaps over a parameter grid and their fitted log-log slope."""
    rows = []
    params = list(config.params)
    gaps = []
    partition = None
    if config.kind != "finite":
        from .rates import sc3_partition

        partition = sc3_partition(profile)
    if config.kind == "universal":
        C = universal_auto_C(profile, min(params)) if config.C == "auto" else float(config.C)
        for g in params:
            x, r, delta = universal_policy(profile, g, C)
            mech = build_ball_mechanism(profile, x, r, delta, g, C=C)
            gaps.append(exact_region_gap(mech))
    elif config.kind == "sc1":
        C = sc1_auto_C(min(params), config.r0) if config.C == "auto" else float(config.C)
        for g in params:
            x, r, delta = sc1_policy(profile, g, C, config.r0, config.offset)
            mech = build_ball_mechanism(profile, x, r, delta, g, C=C)
            gaps.append(exact_region_gap(mech))
    elif config.kind == "finite":
        for T in params:
            sch = finite_policy(profile, int(T), offset=config.offset)
            gaps.append(exact_region_gap(sch))
    else:
        raise ValueError(f"unknown sweep kind {config.kind!r}")
    x_axis = [1 - g for g in params] if config.kind != "finite" else [float(T) for T in params]
    report = fit_rate(list(zip(x_axis, gaps)))
    slopes = running_slopes(x_axis, gaps)
    for k, (p, gap) in enumerate(zip(params, gaps)):
        if partition is not None:
            eta = predicted_eta(profile, partition, p)
            f_at = float(f_partition(profile, partition, eta))
        else:
            eta, f_at = float("nan"), float("nan")
        rows.append({"gamma_or_T": p, "gap": gap, "eta_star": eta, "f_at_eta": f_at,
                     "slope_running": float(slopes[k])})
    return SweepResult(report=report, rows=tuple(rows))
