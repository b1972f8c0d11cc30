"""Discrete utility distributions, problem instances and joint enumeration.

Every expectation in the library is a finite sum over the independent joint
support of the agents' utility distributions. This module owns that support:
it validates distributions, enumerates joint outcomes in a fixed order and
samples utilities reproducibly.

The joint support is always ordered in C order over per-agent atom indices
(the last agent varies fastest). Allocation tables and promise arrays are
indexed the same way.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import DEFAULT_CONFIG
from .errors import CapExceeded

PROB_SUM_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteDist:
    """A finitely supported utility distribution.

    Atoms with zero probability are dropped at construction, so every stored
    atom carries positive mass.

    Parameters
    ----------
    atoms : sequence of float
        Strictly increasing, nonnegative utility values.
    probs : sequence of float
        Matching probabilities, summing to one within 1e-12.
    """

    atoms: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        atoms = tuple(float(a) for a in self.atoms)
        probs = tuple(float(p) for p in self.probs)
        if len(atoms) == 0:
            raise ValueError("a distribution needs at least one atom")
        if len(atoms) != len(probs):
            raise ValueError("atoms and probs must have equal length")
        if any(not math.isfinite(a) for a in atoms) or any(a < 0 for a in atoms):
            raise ValueError("atoms must be finite and nonnegative")
        if any(b <= a for a, b in zip(atoms, atoms[1:])):
            raise ValueError("atoms must be strictly increasing")
        if any(not math.isfinite(p) or p < 0 for p in probs):
            raise ValueError("probabilities must be finite and nonnegative")
        if abs(math.fsum(probs) - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"probabilities sum to {math.fsum(probs)!r}, not 1")
        keep = [k for k, p in enumerate(probs) if p > 0]
        object.__setattr__(self, "atoms", tuple(atoms[k] for k in keep))
        object.__setattr__(self, "probs", tuple(probs[k] for k in keep))

    @property
    def size(self) -> int:
        """Number of atoms."""
        return len(self.atoms)

    @cached_property
    def atom_array(self) -> np.ndarray:
        arr = np.array(self.atoms, dtype=float)
        arr.flags.writeable = False
        return arr

    @cached_property
    def prob_array(self) -> np.ndarray:
        arr = np.array(self.probs, dtype=float)
        arr.flags.writeable = False
        return arr

    @cached_property
    def cdf_array(self) -> np.ndarray:
        """Cumulative probabilities at each atom, last entry forced to 1."""
        arr = np.cumsum(self.prob_array)
        arr[-1] = 1.0
        arr.flags.writeable = False
        return arr

    @property
    def zero_mass(self) -> float:
        """Probability that the utility equals zero."""
        return self.probs[0] if self.atoms[0] == 0.0 else 0.0

    @property
    def max_atom(self) -> float:
        return self.atoms[-1]

    @property
    def min_positive_atom(self) -> float:
        """Smallest positive atom, or ``inf`` when the utility is always 0."""
        for a in self.atoms:
            if a > 0:
                return a
        return math.inf


@dataclass(frozen=True)
class JointOutcome:
    """One joint utility outcome with its product probability."""

    values: tuple[float, ...]
    prob: float
    indices: tuple[int, ...]


@dataclass(frozen=True)
class JointArrays:
    """Dense arrays describing the joint support.

    Attributes
    ----------
    index : numpy.ndarray
        ``(N, n)`` atom indices in C order.
    values : numpy.ndarray
        ``(N, n)`` utility values.
    probs : numpy.ndarray
        ``(N,)`` product probabilities.
    shape : tuple of int
        Per-agent support sizes.
    """

    index: np.ndarray
    values: np.ndarray
    probs: np.ndarray
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(self.probs.shape[0])


@dataclass(frozen=True)
class UtilityProfile:
    """The problem instance: per-agent distributions, bound and weights.

    Parameters
    ----------
    dists : tuple of DiscreteDist
        One distribution per agent.
    vbar : float
        Common upper bound on utilities.
    alpha : tuple of float
        Nonnegative welfare weights, not all zero.
    """

    dists: tuple[DiscreteDist, ...]
    vbar: float
    alpha: tuple[float, ...]

    def __post_init__(self) -> None:
        dists = tuple(self.dists)
        alpha = tuple(float(a) for a in self.alpha)
        vbar = float(self.vbar)
        object.__setattr__(self, "dists", dists)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "vbar", vbar)
        if len(dists) == 0:
            raise ValueError("a profile needs at least one agent")
        if len(alpha) != len(dists):
            raise ValueError("alpha must have one weight per agent")
        if not (vbar > 0 and math.isfinite(vbar)):
            raise ValueError("vbar must be positive and finite")
        for i, d in enumerate(dists):
            if d.max_atom > vbar:
                raise ValueError(f"agent {i} has an atom above vbar")
        if any(a < 0 or not math.isfinite(a) for a in alpha) or max(alpha) <= 0:
            raise ValueError("alpha must be nonnegative with a positive entry")

    @property
    def n(self) -> int:
        return len(self.dists)

    @cached_property
    def means(self) -> np.ndarray:
        """Vector of expected utilities ``E[u_i]``."""
        arr = np.array([mean(d) for d in self.dists], dtype=float)
        arr.flags.writeable = False
        return arr

    @cached_property
    def alpha_array(self) -> np.ndarray:
        arr = np.array(self.alpha, dtype=float)
        arr.flags.writeable = False
        return arr

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(d.size for d in self.dists)

    @property
    def joint_size(self) -> int:
        return math.prod(self.shape)

    def joint(self, cap: int | None = None) -> JointArrays:
        """Dense joint-support arrays (cached), guarded by ``cap``."""
        limit = DEFAULT_CONFIG.joint_cap if cap is None else cap
        if self.joint_size > limit:
            raise CapExceeded(
                f"joint support has {self.joint_size} outcomes, cap is {limit}"
            )
        return self._joint

    @cached_property
    def _joint(self) -> JointArrays:
        shape = self.shape
        index = np.indices(shape).reshape(len(shape), -1).T.copy()
        values = np.empty(index.shape, dtype=float)
        probs = np.ones(index.shape[0], dtype=float)
        for i, d in enumerate(self.dists):
            values[:, i] = d.atom_array[index[:, i]]
            probs *= d.prob_array[index[:, i]]
        for arr in (index, values, probs):
            arr.flags.writeable = False
        return JointArrays(index=index, values=values, probs=probs, shape=shape)

    def with_alpha(self, alpha: Sequence[float]) -> "UtilityProfile":
        """Same distributions with different welfare weights."""
        return UtilityProfile(self.dists, self.vbar, tuple(alpha))


def mean(dist: DiscreteDist) -> float:
    """Expected value ``sum_k atom_k * prob_k``."""
    return math.fsum(a * p for a, p in zip(dist.atoms, dist.probs))


def survival(dist: DiscreteDist, v: float) -> float:
    """Survival probability ``P(u > v)``, a right-continuous step function."""
    return math.fsum(p for a, p in zip(dist.atoms, dist.probs) if a > v)


def joint_support(profile: UtilityProfile, cap: int | None = None) -> list[JointOutcome]:
    """Enumerate the independent joint support in C order.

    Raises
    ------
    CapExceeded
        When the product of support sizes exceeds ``cap``.
    """
    arrays = profile.joint(cap)
    return [
        JointOutcome(
            values=tuple(float(v) for v in arrays.values[k]),
            prob=float(arrays.probs[k]),
            indices=tuple(int(j) for j in arrays.index[k]),
        )
        for k in range(arrays.size)
    ]


def sample_index(dist: DiscreteDist, uniforms: np.ndarray) -> np.ndarray:
    """Map uniforms in [0, 1) to atom indices by inverse CDF."""
    idx = np.searchsorted(dist.cdf_array, uniforms, side="right")
    return np.minimum(idx, dist.size - 1)


def sample(dist: DiscreteDist, rng: np.random.Generator, size: int | None = None):
    """Draw utilities from ``dist`` using the caller-owned generator.

    Returns a float when ``size`` is None, otherwise an array of draws.
    """
    u = rng.random() if size is None else rng.random(size)
    idx = sample_index(dist, np.asarray(u))
    out = dist.atom_array[idx]
    return float(out) if size is None else out


def discretize_uniform(a: float, b: float, k: int) -> DiscreteDist:
    """Uniform distribution on the midpoints of ``k`` equal cells of [a, b]."""
    if not (0 <= a < b) or k < 2:
        raise ValueError("need 0 <= a < b and k >= 2")
    width = (b - a) / k
    atoms = tuple(a + (j + 0.5) * width for j in range(k))
    return DiscreteDist(atoms, tuple([1.0 / k] * k))


def point_mass(value: float) -> DiscreteDist:
    return DiscreteDist((value,), (1.0,))


def uniform_on(atoms: Sequence[float]) -> DiscreteDist:
    """Equal weights on the given (sorted) atoms."""
    atoms = tuple(sorted(float(a) for a in atoms))
    return DiscreteDist(atoms, tuple([1.0 / len(atoms)] * len(atoms)))


def profile_from_dict(data: dict[str, Any]) -> UtilityProfile:
    """Build a profile from the instance-file dictionary layout."""
    try:
        agents = data["agents"]
        dists = tuple(DiscreteDist(tuple(a["atoms"]), tuple(a["probs"])) for a in agents)
        vbar = float(data.get("vbar", max(d.max_atom for d in dists)))
        alpha = tuple(data.get("alpha", [1.0] * len(dists)))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed instance: {exc}") from exc
    return UtilityProfile(dists, vbar, alpha)


def profile_to_dict(profile: UtilityProfile) -> dict[str, Any]:
    return {
        "vbar": profile.vbar,
        "alpha": list(profile.alpha),
        "agents": [{"atoms": list(d.atoms), "probs": list(d.probs)} for d in profile.dists],
    }


def load_instance(path: str | Path) -> UtilityProfile:
    """Read an instance JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        return profile_from_dict(json.load(fh))
