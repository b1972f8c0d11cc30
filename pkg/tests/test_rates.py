"""Rate functions, max-flow certificates, partitions, gluing and slope fitting."""

from __future__ import annotations

import math
from fractions import Fraction as Fr

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import exact_agents, random_profile
from promise_ledger.config import Config
from promise_ledger.dist import UtilityProfile, uniform_on
from promise_ledger.errors import DegenerateSeries, PartitionTooLarge
from promise_ledger.rates import (
    band_value,
    eta_grid,
    f_pair,
    f_partition,
    f_tilde,
    fit_rate,
    g_i,
    gluing_profile,
    lower_eta,
    max_flow,
    partition_from_graph,
    predicted_eta,
    rate_functions,
    running_slopes,
    sc3_partition,
    strongly_connected_components,
)

HALF = [Fr(1, 2), Fr(1, 2)]
TIE_EXACT = [([Fr(1, 6), Fr(5, 6)], HALF)] * 2
TIE_FREE_EXACT = [([Fr(1, 5), Fr(4, 5)], HALF), ([Fr(3, 10), Fr(7, 10)], HALF)]
ETAS = [0.0, 0.01, 0.1, 1 / 7, 0.25, 0.5, 1.0, 3.0]


# -- f_pair -------------------------------------------------------------------


def test_f_pair_tie_instance_frozen(tie):
    frozen = oracles.f_pair(TIE_EXACT, [1, 1], 0, 1, Fr(0))
    assert frozen == Fr(1, 4)
    assert f_pair(tie, 0, 1, 0.0) == pytest.approx(0.25, abs=1e-15)


def test_f_pair_tie_free_values(tie_free):
    assert f_pair(tie_free, 0, 1, 0.0) == 0.0
    frozen = oracles.f_pair(TIE_FREE_EXACT, [1, 1], 0, 1, Fr(1, 2))
    assert frozen == Fr(1, 20)
    assert f_pair(tie_free, 0, 1, 0.5) == pytest.approx(float(frozen), abs=1e-15)


def test_f_pair_rejects_same_agent(tie):
    with pytest.raises(ValueError):
        f_pair(tie, 1, 1, 0.1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 3))
def test_f_pair_matches_oracle(seed, n):
    prof = random_profile(np.random.default_rng(seed), n, max_atoms=3, random_alpha=True)
    agents = exact_agents(prof)
    alpha = [Fr(a) for a in prof.alpha]
    for eta in (0.0, 0.125, 0.5):
        for i in range(n):
            for j in range(n):
                if i != j:
                    want = float(oracles.f_pair(agents, alpha, i, j, Fr(eta)))
                    assert f_pair(prof, i, j, eta) == pytest.approx(want, abs=1e-12)


# -- g_i ----------------------------------------------------------------------


def test_g_zero_below_smallest_ratio_gap(tie_free):
    etas = np.linspace(0.0, 0.14, 50)
    assert np.all(g_i(tie_free, 0, etas) == 0.0)
    assert np.all(g_i(tie_free, 1, etas) == 0.0)


def test_g_at_ratio_gap(tie_free):
    frozen = oracles.g_i(TIE_FREE_EXACT, [1, 1], 0, Fr(1, 7))
    assert frozen == Fr(1, 5)
    assert g_i(tie_free, 0, 1 / 7) == pytest.approx(0.2, abs=1e-12)


def test_g_large_eta_is_mean(tie_free):
    for i in range(2):
        assert g_i(tie_free, i, 100.0) == pytest.approx(tie_free.means[i], abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 3))
def test_g_matches_oracle(seed, n):
    prof = random_profile(np.random.default_rng(seed), n, max_atoms=3, random_alpha=True)
    agents = exact_agents(prof)
    alpha = [Fr(a) for a in prof.alpha]
    for eta in (0.0, 0.25, 1.0):
        for i in range(n):
            want = float(oracles.g_i(agents, alpha, i, Fr(eta)))
            assert g_i(prof, i, eta) == pytest.approx(want, abs=1e-12)


def test_single_agent_g_is_zero():
    prof = UtilityProfile((uniform_on([0.2, 0.6]),), 1.0, (1.0,))
    assert g_i(prof, 0, 1.0) == 0.0
    assert band_value(prof, 0, 1.0) == 0.0


# -- f_partition and f_tilde --------------------------------------------------


def test_f_partition_tie_instance(tie):
    assert f_partition(tie, [(0, 1)], 0.0) == pytest.approx(0.25, abs=1e-15)
    assert oracles.f_partition(TIE_EXACT, [1, 1], [(0, 1)], Fr(0)) == Fr(1, 4)


def test_f_partition_tie_free_zero(tie_free):
    assert f_partition(tie_free, [(0, 1)], 0.0) == 0.0


def test_f_partition_limit():
    prof = UtilityProfile(tuple(uniform_on([0.5]) for _ in range(17)), 1.0, (1.0,) * 17)
    with pytest.raises(PartitionTooLarge):
        f_partition(prof, [tuple(range(17))], 0.1)
    with pytest.raises(PartitionTooLarge):
        f_tilde(prof, [tuple(range(17))], 0.1)


def test_partition_validation(tie):
    with pytest.raises(ValueError):
        f_partition(tie, [(0,)], 0.1)
    with pytest.raises(ValueError):
        f_partition(tie, [(0, 0)], 0.1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_f_partition_matches_oracle(seed, n):
    prof = random_profile(np.random.default_rng(seed), n, max_atoms=3, random_alpha=True)
    alpha = [Fr(a) for a in prof.alpha]
    part = [tuple(range(n))]
    for eta in (0.0, 0.3):
        want = float(oracles.f_partition(exact_agents(prof), alpha, part, Fr(eta)))
        assert f_partition(prof, part, eta) == pytest.approx(want, abs=1e-12)


def test_f_tilde_two_agents_is_min_pair(tie_free):
    for eta in ETAS:
        want = min(f_pair(tie_free, 0, 1, eta), f_pair(tie_free, 1, 0, eta))
        assert f_tilde(tie_free, [(0, 1)], eta) == pytest.approx(want, abs=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_sandwich(seed, n):
    prof = random_profile(np.random.default_rng(seed), n, max_atoms=3, random_alpha=True)
    alpha = np.asarray(prof.alpha)
    part = [tuple(range(n))]
    for eta in (0.0, 0.05, 0.2, 0.7):
        f = f_partition(prof, part, eta)
        ft = f_tilde(prof, part, eta)
        assert ft - f / alpha.max() >= -1e-9
        assert n * f / alpha.min() - ft >= -1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 3))
def test_monotone_in_eta(seed, n):
    prof = random_profile(np.random.default_rng(seed), n, max_atoms=4, random_alpha=True)
    etas = np.array(sorted(ETAS))
    rf = rate_functions(prof, [tuple(range(n))], etas)
    for curve in [*rf.pairs.values(), *rf.g.values(), rf.f, rf.f_tilde]:
        assert np.all(np.diff(curve) >= -1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_band_containment(seed, n):
    prof = random_profile(np.random.default_rng(seed), n, max_atoms=4, random_alpha=True)
    etas = np.array(ETAS)
    for i in range(n):
        assert np.all(g_i(prof, i, etas) >= band_value(prof, i, etas) - 1e-15)


# -- max flow -----------------------------------------------------------------


def test_max_flow_small_cases():
    assert max_flow([0, 1], [(0, 1, 0.7)], 0, 1) == pytest.approx(0.7)
    tri = [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]
    assert max_flow([0, 1, 2], tri, 0, 2) == pytest.approx(2.0)
    assert max_flow([0, 1, 2], [(0, 1, 1.0)], 0, 2) == 0.0


def test_max_flow_input_checks():
    with pytest.raises(ValueError):
        max_flow([0, 1], [(0, 1, -1.0)], 0, 1)
    with pytest.raises(ValueError):
        max_flow([0, 1], [(0, 1, 1.0)], 0, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7))
def test_max_flow_against_networkx_and_cuts(seed, m):
    rng = np.random.default_rng(seed)
    edges = []
    G = nx.DiGraph()
    G.add_nodes_from(range(m))
    for a in range(m):
        for b in range(m):
            if a != b and rng.random() < 0.5:
                c = int(rng.integers(0, 10))
                edges.append((a, b, c))
                G.add_edge(a, b, capacity=c)
    ours = max_flow(range(m), edges, 0, m - 1)
    ref = nx.maximum_flow_value(G, 0, m - 1)
    cut = oracles.max_flow_cuts(range(m), [(a, b, Fr(c)) for a, b, c in edges], 0, m - 1)
    assert ours == pytest.approx(ref, abs=1e-9)
    assert ours == pytest.approx(float(cut), abs=1e-9)


# -- partitions -----------------------------------------------------------------


def test_sc3_tie_instance(tie):
    assert sc3_partition(tie) == ((0, 1),)


def test_sc3_tie_free_none(tie_free):
    assert sc3_partition(tie_free) is None


def test_sc3_rejects_bad_probe(tie):
    with pytest.raises(ValueError):
        sc3_partition(tie, eta_probe=0.0)


def test_scc_split_of_chain_graph():
    edges = [(0, 1), (1, 0), (2, 3), (3, 2), (1, 2)]
    assert partition_from_graph(range(4), edges) == ((0, 1), (2, 3))
    assert strongly_connected_components(range(4), edges) == [(0, 1), (2, 3)]


def test_partition_none_with_singleton_component():
    assert partition_from_graph(range(3), [(0, 1), (1, 0), (1, 2)]) is None


def test_scc_matches_networkx():
    rng = np.random.default_rng(7)
    for _ in range(30):
        m = int(rng.integers(2, 9))
        edges = [(a, b) for a in range(m) for b in range(m) if a != b and rng.random() < 0.3]
        G = nx.DiGraph()
        G.add_nodes_from(range(m))
        G.add_edges_from(edges)
        ref = sorted(tuple(sorted(c)) for c in nx.strongly_connected_components(G))
        assert strongly_connected_components(range(m), edges) == ref


# -- predicted eta and lower eta ----------------------------------------------


def test_predicted_eta_tie_instance_hits_grid_minimum(tie):
    # f is the constant 1/4 on [0, 4), so eta* = 4 sqrt(1 - gamma) until the grid floor
    assert predicted_eta(tie, [(0, 1)], 1 - 1e-10) == pytest.approx(eta_grid()[0])
    assert predicted_eta(tie, [(0, 1)], 1 - 1e-4) == pytest.approx(0.04, rel=0.05)


def test_predicted_eta_tie_free_above_gap(tie_free):
    eta = predicted_eta(tie_free, [(0, 1)], 0.999)
    assert eta > 1 / 7


def test_predicted_eta_linear_regime():
    """A dense near-tie instance has ``f`` close to linear, so eta* scales like sqrt(1 - gamma)."""
    k = 200
    d = uniform_on(list((np.arange(k) + 0.5) / k))
    prof = UtilityProfile((d, d), 1.0, (1.0, 1.0))
    cfg = Config(C_eta=0.05)
    e1 = predicted_eta(prof, [(0, 1)], 1 - 1e-2, cfg)
    e2 = predicted_eta(prof, [(0, 1)], 1 - 1e-4, cfg)
    assert e2 < e1
    assert math.log(e1 / e2) / math.log(100) == pytest.approx(0.5, abs=0.15)


def test_lower_eta(tie_free):
    assert lower_eta(tie_free, 0, 0.999) >= 0.14
    assert lower_eta(tie_free, 0, 0.999) < 1 / 7 + 0.05


# -- gluing profile -------------------------------------------------------------


def test_gluing_endpoints():
    assert gluing_profile(0.3, 0.01, 2.0, 0.3, 0.99) == 0.01
    gamma = 1 - (2.0 * 0.05 / 10) ** 2
    val = gluing_profile(0.0, 1.0, 2.0, 0.05, gamma)
    assert val == pytest.approx(1 / math.cosh(10), rel=1e-12)
    assert val == pytest.approx(9.08e-5, rel=1e-3)
    assert val == pytest.approx(2 * math.exp(-10), rel=0.01)


def test_gluing_vanishes_as_gamma_to_one():
    vals = [gluing_profile(0.1, 1.0, 1.0, 0.2, 1 - 10.0 ** -k) for k in range(2, 9)]
    assert np.all(np.diff(vals) < 0)
    assert vals[-1] < 1e-100


def test_gluing_rejects_bad_input():
    with pytest.raises(ValueError):
        gluing_profile(0.5, 1.0, 1.0, 0.2, 0.9)
    with pytest.raises(ValueError):
        gluing_profile(0.1, 1.0, 1.0, 0.2, 1.0)


# -- slope fitting --------------------------------------------------------------


def test_fit_rate_exact_power_laws():
    x = 2.0 ** -np.arange(4, 11)
    rep = fit_rate(zip(x, np.sqrt(x)))
    assert rep.slope == pytest.approx(0.5, abs=1e-9)
    rep = fit_rate(zip(x, 3 * x))
    assert rep.slope == pytest.approx(1.0, abs=1e-9)
    assert rep.intercept == pytest.approx(math.log(3), abs=1e-9)
    assert rep.residual < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fit_rate_noisy(seed):
    rng = np.random.default_rng(seed)
    x = 2.0 ** -np.arange(4, 11)
    y = x ** 0.7 * (1 + 0.1 * rng.uniform(-1, 1, x.size))
    assert fit_rate(zip(x, y)).slope == pytest.approx(0.7, abs=0.1)


def test_fit_rate_degenerate():
    x = [0.1, 0.2, 0.3, 0.4, 0.5]
    with pytest.raises(DegenerateSeries):
        fit_rate(zip(x[:4], x[:4]))
    with pytest.raises(DegenerateSeries):
        fit_rate(zip(x, [1, 1, 0, 1, 1]))
    with pytest.raises(DegenerateSeries):
        fit_rate(zip(x, [1, 1, -1, 1, 1]))


def test_running_slopes():
    x = 2.0 ** -np.arange(5)
    s = running_slopes(x, x ** 2)
    assert math.isnan(s[0])
    assert np.allclose(s[1:], 2.0)
