"""Monte Carlo play, exact gaps, deviation search and sweeps."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tie_free_profile
from promise_ledger.dist import UtilityProfile, uniform_on
from promise_ledger.errors import GridTooLarge, ScheduleInfeasible, StateOutsideRegion
from promise_ledger.geometry import no_info_value, support_value
from promise_ledger.mechanism import (
    NoInformationMechanism,
    StationaryMechanism,
    build_ball_mechanism,
    verify_ic,
)
from promise_ledger.realize import constant_table, first_best_table, one_shot_optimum, realized_utilities
from promise_ledger.sim import (
    CHUNK,
    Deviator,
    SweepConfig,
    best_response_search,
    discounted_total,
    exact_region_gap,
    finite_policy,
    report_maps,
    run_discounted,
    run_finite,
    sweep,
    truncation_rounds,
    welfare_accounting,
)


@pytest.fixture(scope="module")
def ball():
    """Tie-free instance, measured constant, moderate discount."""
    return build_ball_mechanism(tie_free_profile(), (0.3, 0.2), 0.03, 0.04, 0.997, C="measured")


@pytest.fixture(scope="module")
def fast_ball():
    """Tie-free instance at gamma = 0.98 (a few hundred rounds per episode)."""
    return build_ball_mechanism(tie_free_profile(), (0.24, 0.2), 0.05, 0.05, 0.98, C="measured")


# -- truncation and accounting --------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.999))
def test_truncation_rule(gamma):
    t = truncation_rounds(gamma, 1e-6)
    assert gamma ** t <= 1e-6 * (1 + 1e-12)
    assert t == 1 or gamma ** (t - 1) > 1e-6 * (1 - 1e-12)


def test_truncation_single_round_at_zero():
    assert truncation_rounds(0.0) == 1


def test_records_recompute_totals():
    prof = tie_free_profile()
    mech = NoInformationMechanism(prof, 0.5)
    state = mech.decompose([0.2, 0.15])
    trace = run_discounted(mech, 0.5, 8, seed=11, state=state, record=True)
    assert trace.rounds == truncation_rounds(0.5) <= 50
    recomputed = discounted_total(trace.records, 0.5)
    assert np.allclose(recomputed, trace.totals[0], atol=1e-12, rtol=0)


def test_welfare_accounting(ball):
    state = ball.default_state()
    acc = welfare_accounting(ball, state)
    alpha = ball.profile.alpha_array
    assert acc["welfare"] == pytest.approx(float(alpha @ state.U), abs=1e-15)
    assert acc["first_best"] == pytest.approx(support_value(ball.profile, alpha), abs=1e-15)
    assert acc["regret"] == pytest.approx(acc["first_best"] - acc["welfare"], abs=1e-15)


# -- Monte Carlo ---------------------------------------------------------------


def test_identity_deviator_equals_truthful(fast_ball):
    a = run_discounted(fast_ball, 0.98, 64, seed=5)
    b = run_discounted(fast_ball, 0.98, 64, seed=5, strategy=Deviator(0, (0, 1)))
    assert np.array_equal(a.totals, b.totals)


def test_threads_do_not_change_results(fast_ball):
    episodes = CHUNK + 100
    a = run_discounted(fast_ball, 0.98, episodes, seed=2, threads=1)
    b = run_discounted(fast_ball, 0.98, episodes, seed=2, threads=3)
    assert np.array_equal(a.totals, b.totals)


def test_seeds_give_distinct_consistent_runs(fast_ball):
    a = run_discounted(fast_ball, 0.98, 400, seed=1)
    b = run_discounted(fast_ball, 0.98, 400, seed=2)
    assert not np.array_equal(a.totals, b.totals)
    se = np.sqrt(a.stderr ** 2 + b.stderr ** 2)
    assert np.all(np.abs(a.means - b.means) <= 4 * se)


def test_truthful_mean_matches_promise(fast_ball):
    trace = run_discounted(fast_ball, 0.98, 2000, seed=9)
    tol = 3 * trace.stderr + trace.tail_bound
    assert np.all(np.abs(trace.means - trace.target) <= tol)


def test_zero_discount_is_one_shot():
    prof = tie_free_profile()
    table = first_best_table(prof, [1, 1])
    mech = StationaryMechanism(prof, table, 0.0)
    trace = run_discounted(mech, 0.0, 20_000, seed=4)
    assert trace.rounds == 1
    want = realized_utilities(table)
    assert np.all(np.abs(trace.means - want) <= 4 * trace.stderr)


def test_finite_one_round_is_one_shot_gap(tie_free):
    trace = run_finite(None, 1, 500, seed=0, profile=tie_free)
    opt = one_shot_optimum(tie_free)
    sigma = support_value(tie_free, tie_free.alpha_array)
    assert trace.exact_gap == pytest.approx(sigma - opt.value, abs=1e-12)


def test_finite_rejects_mismatched_schedule(tie):
    sch = finite_policy(tie, 100)
    with pytest.raises(ValueError):
        run_finite(sch, 101, 10, seed=0)


def test_finite_one_round_seeds(tie_free):
    a = run_finite(None, 1, 2000, seed=1, profile=tie_free)
    b = run_finite(None, 1, 2000, seed=2, profile=tie_free)
    assert not np.array_equal(a.totals, b.totals)
    se = np.sqrt(a.stderr ** 2 + b.stderr ** 2)
    assert np.all(np.abs(a.means - b.means) <= 4 * se)


def test_scaled_schedule_promises_escape(tie):
    """With the scaled constant the schedule's promises leave the next region."""
    sch = finite_policy(tie, 100)
    with pytest.raises(StateOutsideRegion):
        run_finite(sch, 100, 64, seed=3)


# -- exact gaps ----------------------------------------------------------------


def test_region_gap_formula(ball):
    prof = ball.profile
    a = prof.alpha_array
    want = support_value(prof, a) - max(no_info_value(prof, a), float(a @ ball.x) + ball.r * np.linalg.norm(a))
    assert exact_region_gap(ball) == pytest.approx(want, abs=1e-15)


def test_finite_gap_decreases_with_horizon(tie):
    gaps = [exact_region_gap(finite_policy(tie, T)) for T in (100, 400, 1600)]
    assert gaps[0] > gaps[1] > gaps[2] > 0


def test_finite_policy_needs_smooth_vertex(tie_free):
    with pytest.raises(ScheduleInfeasible):
        finite_policy(tie_free, 100)


# -- deviation search ----------------------------------------------------------


def test_report_maps_count():
    assert len(report_maps(3)) == 27
    assert (0, 1, 2) in report_maps(3)


def test_valid_ball_has_no_profitable_deviation(ball):
    state = ball.default_state()
    vbar = ball.profile.vbar
    for i in range(2):
        assert best_response_search(ball, state, i) <= 1e-6 * vbar
    assert verify_ic(ball, state) <= 1e-8


def test_zero_margin_admits_profitable_deviation(tie_free):
    mech = build_ball_mechanism(tie_free, (0.3, 0.2), 0.03, 0.0, 0.997, check_margin=False)
    gains = [best_response_search(mech, mech.boundary_state(d), 0, on_escape="project") for d in mech.grid[:3]]
    assert max(gains) > 1e-6


def test_single_agent_has_no_dynamic_gain():
    prof = UtilityProfile((uniform_on([0.2, 0.6]),), 1.0, (1,))
    mech = StationaryMechanism(prof, constant_table(prof, [1.0]), gamma=0.5)
    assert best_response_search(mech, mech.decompose(), 0) == 0.0


def test_grid_cap(ball):
    with pytest.raises(GridTooLarge):
        best_response_search(ball, ball.default_state(), 0, depth=3, cap=100)


# -- sweeps --------------------------------------------------------------------


def test_universal_sweep_csv_is_deterministic(tie_free):
    cfg = SweepConfig(kind="universal", params=tuple(1 - 2.0 ** -k for k in range(4, 9)))
    a, b = sweep(tie_free, cfg), sweep(tie_free, cfg)
    assert a.csv() == b.csv()
    assert a.csv().splitlines()[0] == "gamma_or_T,gap,eta_star,f_at_eta,slope_running"
    assert len(a.rows) == 5
    assert all(row["gap"] > 0 for row in a.rows)
    assert math.isnan(a.rows[0]["slope_running"])


def test_sweep_rejects_unknown_kind(tie_free):
    with pytest.raises(ValueError):
        sweep(tie_free, SweepConfig(kind="bogus", params=(0.9,) * 5))
