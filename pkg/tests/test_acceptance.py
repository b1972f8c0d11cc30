"""Acceptance criteria, one test each.

Every test prints a single ``ACCEPTANCE <k> PASS|FAIL: ...`` line straight to
the terminal and then asserts at the stated tolerance.
"""

from __future__ import annotations

import itertools
import math
import time
from fractions import Fraction as Fr

import numpy as np
import pytest

import oracles
from conftest import random_profile, tie_free_profile, tie_profile
from promise_ledger.dist import DiscreteDist, UtilityProfile, uniform_on
from promise_ledger.errors import PromiseLedgerError
from promise_ledger.geometry import (
    BallQuery,
    DominantAgent,
    Hierarchy,
    Inside,
    ball_in_ustar,
    classify_trivial,
    prune,
    support_value,
)
from promise_ledger.mechanism import (
    StationaryMechanism,
    build_ball_mechanism,
    couple_promises,
    step,
    verify_ic,
    verify_promise_keeping,
    verify_valid_promises,
)
from promise_ledger.rates import f_partition, f_tilde, g_i, gluing_profile
from promise_ledger.realize import (
    AllocationTable,
    FixedPriority,
    Infeasible,
    first_best_table,
    one_shot_optimum,
    realize_point,
    realized_utilities,
)
from promise_ledger.sim import SweepConfig, finite_policy, run_discounted, sweep

GAMMA_GRID = tuple(1 - 2.0 ** -k for k in range(4, 11))


@pytest.fixture
def verdict(capsys):
    """Print one pass/fail line past pytest's capture."""

    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {detail}")

    return emit


# -- 1. coupling --------------------------------------------------------------


def test_acceptance_01_coupling(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_plane = 0.0
    for _ in range(10_000):
        n = int(rng.integers(2, 7))
        alpha = rng.uniform(0.1, 2.0, n) * rng.choice([-1.0, 1.0], n)
        W = rng.uniform(-1, 1, n)
        means = rng.uniform(-1, 1, n)
        for variant in ("new", "legacy"):
            Z = couple_promises(W[None], means, alpha, variant)[0]
            worst_plane = max(worst_plane, abs(alpha @ Z - alpha @ means))
    worst_cond = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 7))
        alpha = rng.uniform(0.1, 2.0, n)
        sizes = rng.integers(1, 5, n)
        atoms = [rng.uniform(-1, 1, k) for k in sizes]
        probs = [rng.dirichlet(np.ones(k)) for k in sizes]
        means = np.array([a @ p for a, p in zip(atoms, probs)])
        grid = np.array(list(itertools.product(*atoms)))
        weight = np.array([np.prod(c) for c in itertools.product(*probs)])
        for variant in ("new", "legacy"):
            Z = couple_promises(grid, means, alpha, variant)
            for i in range(n):
                for v in atoms[i]:
                    sel = grid[:, i] == v
                    cond = weight[sel] @ Z[sel, i] / weight[sel].sum()
                    worst_cond = max(worst_cond, abs(cond - v))
    elapsed = time.perf_counter() - start
    ok = worst_plane <= 1e-12 and worst_cond <= 1e-10 and elapsed < 10
    verdict(1, ok, f"plane err {worst_plane:.2e}, conditional-mean err {worst_cond:.2e}, {elapsed:.1f}s")
    assert worst_plane <= 1e-12
    assert worst_cond <= 1e-10
    assert elapsed < 10


# -- 2. verifier suite ------------------------------------------------------


def _margin_fixed_point(prof: UtilityProfile, gamma: float, scale: float, r: float):
    """Ball centered at ``scale * E / n`` with the smallest margin meeting the measured chain."""
    n = prof.n
    x = scale * prof.means / n
    r = min(r, 0.3 * float(np.min(x)))
    factor = (1 - gamma) / (gamma * r)
    delta = 0.002
    for _ in range(8):
        try:
            mech = build_ball_mechanism(prof, x, r, delta, gamma, C="measured", check_margin=False)
        except PromiseLedgerError:
            return None
        need = mech.C * factor
        if delta >= need:
            return build_ball_mechanism(prof, x, r, delta, gamma, C=mech.C)
        delta = 1.25 * need
        if delta > r:
            return None
    return None


def valid_ball(prof: UtilityProfile, gamma: float):
    """A ball mechanism whose parameters pass the measured margin chain.

    Balls reaching past the no-information facet are tried first. When none
    is valid the ball is placed strictly inside the no-information region,
    where every table is constant and the measured constant is zero.
    """
    for scale in (1.0, 0.95, 0.9):
        for r in (0.03, 0.015):
            mech = _margin_fixed_point(prof, gamma, scale, r)
            if mech is not None and mech.C > 0:
                return mech
    E = prof.means
    x = 0.45 * E / prof.n
    room = (1 - float(np.sum(x / E))) / float(np.linalg.norm(1 / E))
    r = min(0.4 * room, float(np.min(x)) / 2.5) / 2
    return build_ball_mechanism(prof, x, r, r, gamma, C="measured")


def test_acceptance_02_verifier_suite(verdict):
    start = time.perf_counter()
    worst_pk, worst_slack, worst_ic = 0.0, math.inf, 0.0
    cases, beyond = 0, {0.9: 0, 0.99: 0}
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        prof = random_profile(rng, int(rng.integers(2, 4)), max_atoms=4)
        for gamma in (0.9, 0.99):
            mech = valid_ball(prof, gamma)
            cases += 1
            beyond[gamma] += mech.C > 0
            stride = max(1, len(mech.grid) // 6)
            states = [mech.default_state()] + [mech.boundary_state(d) for d in mech.grid[::stride]]
            walk = np.random.default_rng(seed)
            state = mech.default_state()
            for _ in range(200):
                reports = [d.atoms[int(walk.integers(d.size))] for d in prof.dists]
                state = step(mech, state, reports).next
                worst_slack = min(worst_slack, float(np.min(mech.promise_slack(state, state.U[None]))))
            states.append(state)
            for s in states:
                worst_pk = max(worst_pk, verify_promise_keeping(mech, s))
                worst_slack = min(worst_slack, verify_valid_promises(mech, s))
                worst_ic = max(worst_ic, verify_ic(mech, s))
    elapsed = time.perf_counter() - start
    ok = worst_pk <= 1e-9 and worst_slack >= -1e-9 and worst_ic <= 1e-8 and elapsed < 60
    verdict(2, ok, f"{cases} cases ({beyond[0.9]} at 0.9 and {beyond[0.99]} at 0.99 reach past the "
                   f"no-information facet), keeping {worst_pk:.1e}, slack {worst_slack:.1e}, "
                   f"IC {worst_ic:.1e}, {elapsed:.1f}s")
    assert cases >= 20
    assert worst_pk <= 1e-9
    assert worst_slack >= -1e-9
    assert worst_ic <= 1e-8
    assert elapsed < 60


# -- 3. Monte Carlo consistency ---------------------------------------------


def test_acceptance_03_monte_carlo(verdict):
    start = time.perf_counter()
    mech = build_ball_mechanism(tie_free_profile(), (0.24, 0.2), 0.05, 0.05, 0.98, C="measured")
    trace = run_discounted(mech, 0.98, 10_000, seed=1)
    elapsed = time.perf_counter() - start
    dev = np.abs(trace.means - trace.target)
    tol = 3 * trace.stderr + trace.tail_bound
    ok = bool(np.all(dev <= tol)) and elapsed < 60
    verdict(3, ok, f"|mean - U| = {dev.round(6).tolist()} vs 3se+tail {tol.round(6).tolist()}, "
                   f"{trace.rounds} rounds, {elapsed:.1f}s")
    assert np.all(dev <= tol)
    assert elapsed < 60


# -- 4. tie-free discrete rate ----------------------------------------------


def test_acceptance_04_tie_free_rate(verdict):
    prof = tie_free_profile()
    result = sweep(prof, SweepConfig(kind="universal", params=GAMMA_GRID))
    slope = result.report.slope
    exact = [([Fr(1, 5), Fr(4, 5)], [Fr(1, 2)] * 2), ([Fr(3, 10), Fr(7, 10)], [Fr(1, 2)] * 2)]
    etas = [Fr(k, 1000) for k in range(0, 141)]
    zero_exact = all(oracles.g_i(exact, [1, 1], 0, e) == 0 for e in etas)
    zero_float = bool(np.all(g_i(prof, 0, np.array([float(e) for e in etas])) == 0.0))
    ok = 0.40 <= slope <= 0.60 and zero_exact and zero_float
    verdict(4, ok, f"slope {slope:.4f} in [0.40, 0.60], g_0 = 0 on [0, 0.14]: {zero_exact and zero_float}")
    assert 0.40 <= slope <= 0.60
    assert zero_exact and zero_float


# -- 5. smooth-overlap rate -------------------------------------------------


def test_acceptance_05_smooth_rate(verdict):
    k = 200
    d = uniform_on(list((np.arange(k) + 0.5) / k))
    prof = UtilityProfile((d, d), 1.0, (1.0, 1.0))
    result = sweep(prof, SweepConfig(kind="sc1", params=GAMMA_GRID, r0=0.1))
    slope = result.report.slope
    ok = 0.85 <= slope <= 1.15
    verdict(5, ok, f"slope {slope:.4f} in [0.85, 1.15] (residual {result.report.residual:.3f})")
    assert 0.85 <= slope <= 1.15


# -- 6. rate-function sandwich -----------------------------------------------


def test_acceptance_06_sandwich(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(66)
    etas = np.geomspace(1e-3, 1.0, 8)
    worst = math.inf
    for k in range(20):
        n = (2, 3, 4)[k % 3]
        prof = random_profile(rng, n, max_atoms=4, random_alpha=True)
        alpha = np.asarray(prof.alpha)
        part = [tuple(range(n))]
        f = f_partition(prof, part, etas)
        for e, fv in zip(etas, f):
            ft = f_tilde(prof, part, float(e))
            worst = min(worst, ft - fv / alpha.max(), n * fv / alpha.min() - ft)
    elapsed = time.perf_counter() - start
    ok = worst >= -1e-9 and elapsed < 10
    verdict(6, ok, f"smallest sandwich slack {worst:.2e} over 160 points, {elapsed:.1f}s")
    assert worst >= -1e-9
    assert elapsed < 10


# -- 7. trivial cases ---------------------------------------------------------


def test_acceptance_07_trivial_cases(verdict):
    fig_a = UtilityProfile((uniform_on([0.6, 0.9]), uniform_on([0.1, 0.5])), 1.0, (1, 1))
    fig_b = UtilityProfile((DiscreteDist((0.0, 0.7, 0.9), (0.2, 0.4, 0.4)),
                            DiscreteDist((0.0, 0.5, 0.65), (0.3, 0.35, 0.35)),
                            uniform_on([0.2, 0.4])), 1.0, (1, 1, 1))
    results = []
    for prof, expected in ((fig_a, DominantAgent), (fig_b, Hierarchy)):
        rep = classify_trivial(prof)
        table = rep.optimal_single_shot
        alpha = prof.alpha_array
        gap = support_value(prof, alpha) - float(alpha @ realized_utilities(table))
        ic = verify_ic(StationaryMechanism(prof, table, 0.0), StationaryMechanism(prof, table, 0.0).decompose())
        results.append((isinstance(rep.case, expected), gap, ic))
    ok = all(kind and gap <= 1e-12 and ic <= 1e-8 for kind, gap, ic in results)
    verdict(7, ok, "; ".join(f"scenario {'ab'[k]}: class {r[0]}, gap {r[1]:.1e}, IC {r[2]:.1e}"
                             for k, r in enumerate(results)))
    for kind, gap, ic in results:
        assert kind
        assert gap <= 1e-12
        assert ic <= 1e-8


# -- 8. pruning identity ------------------------------------------------------


def test_acceptance_08_pruning(verdict):
    rng = np.random.default_rng(88)
    worst, pruned_cases = 0.0, 0
    for k in range(100):
        n = int(rng.integers(2, 5))
        prof = random_profile(rng, n, max_atoms=4, zero_atoms=True)
        if k % 4 == 0:
            dists = list(prof.dists)
            d = dists[0]
            upper = d.atoms[1] if d.size > 1 else 1.0
            extra = (d.atoms[0] + upper) / 2
            dists[0] = DiscreteDist((d.atoms[0], extra) + tuple(d.atoms[1:]), (d.probs[0], 0.0) + tuple(d.probs[1:]))
            prof = UtilityProfile(tuple(dists), 1.0, prof.alpha)
        order = tuple(int(i) for i in rng.permutation(n))
        U = realized_utilities(first_best_table(prof, np.ones(n), FixedPriority(order)))
        if k % 2:
            U = U * rng.uniform(0.5, 1.0)
        res = prune(prof, U)
        pruned_cases += bool(res.pruned_indices)
        keep = np.zeros(n, dtype=bool)
        keep[list(res.pruned_indices)] = True
        rebuilt = np.where(keep, U, 0.0) + res.scale * res.U_tilde
        worst = max(worst, float(np.max(np.abs(rebuilt - U))))
    ok = worst <= 1e-12
    verdict(8, ok, f"max reconstruction error {worst:.1e} on 100 instances ({pruned_cases} with pruning)")
    assert worst <= 1e-12
    assert pruned_cases > 0


# -- 9. finite-horizon schedule -----------------------------------------------


def test_acceptance_09_finite_horizon(verdict):
    prof = tie_profile()
    lines = []
    ok_steps = True
    for T in (100, 1000, 10_000):
        sch = finite_policy(prof, T)
        chain, balls = True, True
        seen = set()
        for t in range(sch.T0 + 1, T + 1):
            g = 1 - 1 / t
            r_t, d_t = sch.radii[t], sch.margins[t]
            chain &= r_t * g / (1 - g) - d_t >= -1e-12 * r_t
            chain &= d_t - sch.C_tilde * (1 - g) / (g * r_t) >= -1e-12 * d_t
            key = (tuple(np.round(sch.anchors[t], 13)), round(r_t + d_t, 13))
            if key not in seen:
                seen.add(key)
                verdict_t = ball_in_ustar(prof, BallQuery(tuple(sch.anchors[t]), r_t + d_t))
                balls &= isinstance(verdict_t, Inside)
        drift_ok = sch.drift <= sch.delta / 2
        ok_steps &= bool(chain and balls and drift_ok)
        lines.append(f"T={T}: chain {chain}, balls {balls} ({len(seen)} checked), drift/delta "
                     f"{sch.drift / sch.delta:.3f}")
    Ts = (100, 178, 316, 562, 1000, 1778, 3162, 5623, 10_000)
    result = sweep(prof, SweepConfig(kind="finite", params=tuple(float(T) for T in Ts)))
    slope = result.report.slope
    scaled = np.asarray(result.report.gaps) * np.asarray(Ts)
    floor = support_value(prof, prof.alpha_array) - one_shot_optimum(prof).value
    ok = ok_steps and -1.2 <= slope <= -0.85 and float(scaled.min()) >= floor > 0
    verdict(9, ok, "; ".join(lines) + f"; slope {slope:.4f}, min gap*T {scaled.min():.3f} >= {floor:.4f}")
    assert ok_steps
    assert -1.2 <= slope <= -0.85
    assert float(scaled.min()) >= floor > 0


# -- 10. realize round trip ---------------------------------------------------


def test_acceptance_10_realize(verdict):
    rng = np.random.default_rng(10)
    worst_err, worst_sep, rejected = 0.0, math.inf, 0
    for k in range(50):
        prof = random_profile(rng, int(rng.integers(2, 4)), max_atoms=3, zero_atoms=bool(k % 2))
        n = prof.n
        weights = rng.dirichlet(np.ones(3))
        V = sum(w * realized_utilities(first_best_table(prof, rng.random(n) + 0.05)) for w in weights)
        table = realize_point(prof, V, tol=1e-9)
        assert isinstance(table, AllocationTable)
        worst_err = max(worst_err, float(np.max(np.abs(realized_utilities(table) - V))))
        beta = rng.random(n) + 0.05
        top = realized_utilities(first_best_table(prof, beta))
        outside = top + 0.05 * beta / np.linalg.norm(beta)
        res = realize_point(prof, outside)
        if isinstance(res, Infeasible):
            rejected += 1
            w = res.witness
            sep = float(w @ outside) - support_value(prof, np.clip(w, 0, None))
            worst_sep = min(worst_sep, sep, res.violation)
    ok = worst_err <= 1e-7 and rejected == 50 and worst_sep >= 1e-7
    verdict(10, ok, f"max round-trip error {worst_err:.1e}, {rejected}/50 rejected, "
                    f"smallest separation {worst_sep:.2e}")
    assert worst_err <= 1e-7
    assert rejected == 50
    assert worst_sep >= 1e-7


# -- 11. gluing profile -------------------------------------------------------


def test_acceptance_11_gluing(verdict):
    delta, c_f, r0 = 0.02, 1.5, 0.1
    endpoint = gluing_profile(r0, delta, c_f, r0, 0.99)
    worst = 0.0
    for arg in (10.0, 12.0, 15.0, 20.0, 40.0, 80.0):
        gamma = 1 - (c_f * r0 / arg) ** 2
        val = gluing_profile(0.0, delta, c_f, r0, gamma)
        worst = max(worst, abs(val / (2 * delta * math.exp(-arg)) - 1))
    ok = endpoint == delta and worst <= 0.01
    verdict(11, ok, f"profile(r0) == delta: {endpoint == delta}, worst relative error at r=0 {worst:.2e}")
    assert endpoint == delta
    assert worst <= 0.01
