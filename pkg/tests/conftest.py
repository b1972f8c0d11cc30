"""Shared instances and random-instance helpers for the test suite."""

from __future__ import annotations

import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from promise_ledger.dist import DiscreteDist, UtilityProfile, uniform_on  # noqa: E402

DATA = Path(__file__).parent / "data"


def tie_profile() -> UtilityProfile:
    """Two iid agents uniform on {1/6, 5/6}."""
    return UtilityProfile((uniform_on([1 / 6, 5 / 6]),) * 2, 1.0, (1.0, 1.0))


def tie_free_profile() -> UtilityProfile:
    """Agent supports {0.2, 0.8} and {0.3, 0.7}, equal weights."""
    return UtilityProfile((uniform_on([0.2, 0.8]), uniform_on([0.3, 0.7])), 1.0, (1.0, 1.0))


def exact_agents(profile: UtilityProfile):
    """Rational copy of the atoms and probabilities for the oracles."""
    return [([Fraction(a) for a in d.atoms], [Fraction(p) for p in d.probs]) for d in profile.dists]


def random_profile(rng: np.random.Generator, n: int, max_atoms: int = 4, zero_atoms: bool = False,
                   grid: int = 20, random_alpha: bool = False) -> UtilityProfile:
    """Random discrete instance with atoms on a ``1/grid`` lattice (ties likely)."""
    dists = []
    for _ in range(n):
        k = int(rng.integers(1, max_atoms + 1))
        lo = 0 if zero_atoms else 1
        atoms = np.sort(rng.choice(np.arange(lo, grid + 1), size=k, replace=False)) / grid
        w = rng.random(k) + 0.1
        probs = w / w.sum()
        probs[-1] = 1.0 - probs[:-1].sum()
        dists.append(DiscreteDist(tuple(atoms), tuple(probs)))
    alpha = tuple(rng.uniform(0.5, 2.0, n)) if random_alpha else (1.0,) * n
    return UtilityProfile(tuple(dists), 1.0, alpha)


@pytest.fixture
def tie():
    return tie_profile()


@pytest.fixture
def tie_free():
    return tie_free_profile()
