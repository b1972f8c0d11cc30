"""Distributions, joint support and sampling."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promise_ledger.dist import (
    DiscreteDist,
    UtilityProfile,
    discretize_uniform,
    joint_support,
    load_instance,
    mean,
    point_mass,
    profile_from_dict,
    profile_to_dict,
    sample,
    survival,
    uniform_on,
)
from promise_ledger.errors import CapExceeded

from conftest import DATA


def test_mean_examples():
    assert mean(uniform_on([1 / 6, 5 / 6])) == pytest.approx(0.5, abs=1e-15)
    assert mean(point_mass(0.7)) == 0.7
    assert mean(DiscreteDist((0.0, 0.5), (0.5, 0.5))) == 0.25


def test_survival_examples():
    d = uniform_on([1 / 6, 5 / 6])
    assert survival(d, 0.0) == 1.0
    assert survival(d, 1 / 6) == 0.5
    assert survival(d, 5 / 6) == 0.0


def test_joint_support_examples():
    two = UtilityProfile((uniform_on([0.1, 0.2]), uniform_on([0.3, 0.4])), 1.0, (1, 1))
    out = joint_support(two)
    assert len(out) == 4 and all(o.prob == 0.25 for o in out)
    one = UtilityProfile((DiscreteDist((0.1, 0.5, 0.9), (0.2, 0.3, 0.5)),), 1.0, (1,))
    assert [o.values[0] for o in joint_support(one)] == [0.1, 0.5, 0.9]
    assert [o.prob for o in joint_support(one)] == [0.2, 0.3, 0.5]
    three = UtilityProfile((uniform_on([0.1, 0.2]), uniform_on([0.1, 0.2, 0.3]), uniform_on([0.5, 0.6])),
                           1.0, (1, 1, 1))
    out = joint_support(three)
    assert len(out) == 12
    assert math.fsum(o.prob for o in out) == pytest.approx(1.0, abs=1e-10)


def test_joint_cap():
    prof = UtilityProfile((discretize_uniform(0, 1, 10),) * 3, 1.0, (1, 1, 1))
    with pytest.raises(CapExceeded):
        prof.joint(cap=999)


def test_sample_examples():
    rng = np.random.default_rng(0)
    assert sample(point_mass(0.3), rng) == 0.3
    draws = sample(uniform_on([1 / 6, 5 / 6]), np.random.default_rng(1), size=100_000)
    assert abs(np.mean(draws == 5 / 6) - 0.5) <= 0.01
    a = sample(uniform_on([1 / 6, 5 / 6]), np.random.default_rng(7), size=50)
    b = sample(uniform_on([1 / 6, 5 / 6]), np.random.default_rng(7), size=50)
    assert np.array_equal(a, b)


def test_discretize_uniform_examples():
    d = discretize_uniform(0, 1, 2)
    assert d.atoms == (0.25, 0.75) and d.probs == (0.5, 0.5)
    d = discretize_uniform(0, 1, 100)
    assert abs(mean(d) - 0.5) <= 1e-12
    prof = UtilityProfile((d, d), 1.0, (1, 1))
    joint = prof.joint()
    assert joint.size == 10_000
    assert abs(joint.probs @ joint.values.max(axis=1) - 2 / 3) <= 0.01


def test_constructor_rejects_bad_input():
    with pytest.raises(ValueError):
        DiscreteDist((0.2, 0.1), (0.5, 0.5))
    with pytest.raises(ValueError):
        DiscreteDist((0.1, 0.2), (0.5, 0.6))
    with pytest.raises(ValueError):
        UtilityProfile((point_mass(2.0),), 1.0, (1,))
    with pytest.raises(ValueError):
        UtilityProfile((point_mass(0.5),), 1.0, (0,))


def test_zero_probability_atoms_are_dropped():
    d = DiscreteDist((0.1, 0.2, 0.3), (0.5, 0.0, 0.5))
    assert d.atoms == (0.1, 0.3)


def test_instance_round_trip(tmp_path):
    prof = load_instance(DATA / "e1.json")
    assert profile_from_dict(profile_to_dict(prof)) == prof
    with pytest.raises(ValueError):
        profile_from_dict({"agents": [{"atoms": [0.1]}]})


atom_lists = st.lists(st.integers(0, 40), min_size=1, max_size=6, unique=True).map(sorted)


@st.composite
def dists(draw):
    atoms = draw(atom_lists)
    w = draw(st.lists(st.integers(1, 9), min_size=len(atoms), max_size=len(atoms)))
    total = sum(w)
    probs = [Fraction(x, total) for x in w]
    return DiscreteDist(tuple(a / 40 for a in atoms), tuple(float(p) for p in probs)), atoms, probs


@given(dists())
@settings(max_examples=200, deadline=None)
def test_mean_equals_survival_integral(item):
    d, atoms, probs = item
    # piecewise-exact integral of the survival step function
    grid = [0.0] + list(d.atoms)
    integral = math.fsum(survival(d, lo) * (hi - lo) for lo, hi in zip(grid, grid[1:]))
    assert abs(mean(d) - integral) <= 1e-10


@given(st.lists(dists(), min_size=1, max_size=3))
@settings(max_examples=100, deadline=None)
def test_joint_support_is_product_measure(items):
    prof = UtilityProfile(tuple(d for d, _, _ in items), 1.0, (1.0,) * len(items))
    joint = prof.joint()
    for i, d in enumerate(prof.dists):
        marginal = np.bincount(joint.index[:, i], weights=joint.probs, minlength=d.size)
        assert np.allclose(marginal, d.prob_array, atol=1e-15, rtol=0)


@given(dists(), st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_sampling_is_reproducible(item, seed):
    d = item[0]
    a = sample(d, np.random.default_rng(seed), size=64)
    b = sample(d, np.random.default_rng(seed), size=64)
    assert a.tobytes() == b.tobytes()
