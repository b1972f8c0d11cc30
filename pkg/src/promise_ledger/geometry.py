"""Geometry of the full-information region U*.

U* is described only through its support function: the largest weighted
welfare ``max_{U in U*} beta^T U`` equals ``E[max_i beta_i u_i]`` for
``beta >= 0``. Everything here (ball membership, classification of agents,
pruning) is built on top of exact support values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence, Union

import numpy as np

from .config import DEFAULT_CONFIG
from .dist import UtilityProfile
from .errors import CapExceeded, NotInRegion

TIE_TOL = 1e-12
ENUM_CHUNK_ELEMENTS = 4_000_000


# ---------------------------------------------------------------------------
# Support values
# ---------------------------------------------------------------------------


def _check_direction(profile: UtilityProfile, beta) -> np.ndarray:
    b = np.asarray(beta, dtype=float).reshape(-1)
    if b.shape[0] != profile.n:
        raise ValueError(f"direction has {b.shape[0]} entries, expected {profile.n}")
    if np.any(b < 0) or not np.any(b > 0):
        raise ValueError("direction must be nonnegative and nonzero")
    return b


def support_value_enumerate(profile: UtilityProfile, beta) -> float:
    """``E[max_i beta_i u_i]`` by summing over the joint support."""
    b = np.asarray(beta, dtype=float)
    joint = profile.joint()
    return float(np.dot(joint.probs, np.max(joint.values * b, axis=1)))


def support_value_breakpoint(profile: UtilityProfile, beta) -> float:
    """``E[max_i beta_i u_i]`` as the integral of ``P(max > t)`` over t.

    The integrand is a step function whose breakpoints are the weighted atoms,
    so the integral is an exact finite sum and never touches the joint support.
    """
    b = np.asarray(beta, dtype=float)
    weighted = [b[i] * d.atom_array for i, d in enumerate(profile.dists)]
    points = np.unique(np.concatenate(weighted + [np.zeros(1)]))
    cdf = np.ones_like(points)
    for i, d in enumerate(profile.dists):
        pos = np.searchsorted(weighted[i], points, side="right") - 1
        cdf *= np.where(pos >= 0, d.cdf_array[np.maximum(pos, 0)], 0.0)
    widths = np.diff(points)
    return float(np.dot(1.0 - cdf[:-1], widths))


def support_value(profile: UtilityProfile, beta, method: str = "auto") -> float:
    """Support value of U* in direction ``beta >= 0``.

    Parameters
    ----------
    method : {"auto", "enumerate", "breakpoint"}
        ``"enumerate"`` sums over the joint support (subject to the cap);
        ``"breakpoint"`` integrates the survival function of the maximum.
        ``"auto"`` uses the breakpoint route, which has no cap.
    """
    b = _check_direction(profile, beta)
    if method == "enumerate":
        return support_value_enumerate(profile, b)
    if method in ("auto", "breakpoint"):
        return support_value_breakpoint(profile, b)
    raise ValueError(f"unknown method {method!r}")


def support_values(profile: UtilityProfile, directions: np.ndarray) -> np.ndarray:
    """Support values for each row of ``directions`` (rows must be >= 0)."""
    B = np.atleast_2d(np.asarray(directions, dtype=float))
    try:
        joint = profile.joint()
    except CapExceeded:
        joint = None
    if joint is not None:
        per_row = max(1, ENUM_CHUNK_ELEMENTS // max(1, joint.values.size))
        out = np.empty(B.shape[0])
        for start in range(0, B.shape[0], per_row):
            chunk = B[start:start + per_row]
            m = np.max(joint.values[None, :, :] * chunk[:, None, :], axis=2)
            out[start:start + per_row] = m @ joint.probs
        return out
    return np.array([support_value_breakpoint(profile, b) for b in B])


def ustar_support(profile: UtilityProfile, beta) -> float:
    """Support value of U* for an arbitrary real direction.

    U* is down-closed in the nonnegative orthant, so only the positive part of
    ``beta`` matters; the value is 0 when ``beta <= 0``.
    """
    bp = np.maximum(np.asarray(beta, dtype=float), 0.0)
    if not np.any(bp > 0):
        return 0.0
    return support_value_breakpoint(profile, bp)


def no_info_value(profile: UtilityProfile, beta) -> float:
    """Support value of the no-information region, ``max_i beta_i E[u_i]``."""
    b = np.asarray(beta, dtype=float)
    if np.any(b < 0):
        raise ValueError("direction must be nonnegative")
    return float(np.max(b * profile.means))


# ---------------------------------------------------------------------------
# Direction grids and ball membership
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _direction_grid_cached(n: int, budget: int) -> np.ndarray:
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        theta = np.linspace(0.0, math.pi / 2, max(budget, 2))
        return np.column_stack([np.cos(theta), np.sin(theta)])
    if n == 3:
        total = 8 * budget
        k = np.arange(total) + 0.5
        z = 1.0 - 2.0 * k / total
        rad = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        phi = math.pi * (3.0 - math.sqrt(5.0)) * k
        pts = np.column_stack([rad * np.cos(phi), rad * np.sin(phi), z])
        pts = pts[np.all(pts >= 0, axis=1)]
    else:
        from scipy.stats import qmc

        m = int(2 ** math.ceil(math.log2(max(budget, 2))))
        angles = qmc.Sobol(d=n - 1, scramble=False).random(m) * (math.pi / 2)
        pts = np.ones((m, n))
        for j in range(n - 1):
            pts[:, j] *= np.cos(angles[:, j])
            pts[:, j + 1:] *= np.sin(angles[:, j])[:, None]
    extras = np.vstack([np.eye(n), np.full((1, n), 1.0 / math.sqrt(n))])
    pts = np.vstack([extras, pts])
    pts = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    pts.flags.writeable = False
    return pts


def direction_grid(n: int, budget: int) -> np.ndarray:
    """Deterministic unit directions covering the nonnegative orthant.

    A uniform angle grid for n = 2, a Fibonacci lattice restricted to the
    positive octant for n = 3, and an unscrambled Sobol set in hyperspherical
    angles for larger n. Coordinate axes and the diagonal are always included.
    """
    return _direction_grid_cached(int(n), int(budget))


@lru_cache(maxsize=32)
def _grid_support_cached(profile: UtilityProfile, budget: int) -> np.ndarray:
    vals = support_values(profile, direction_grid(profile.n, budget))
    vals.flags.writeable = False
    return vals


@dataclass(frozen=True)
class BallQuery:
    """Membership query for the ball ``B(center, radius)`` in U*."""

    center: tuple[float, ...]
    radius: float
    direction_budget: int = DEFAULT_CONFIG.direction_budget
    refinement_steps: int = DEFAULT_CONFIG.refinement_steps

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.direction_budget < 1 or self.refinement_steps < 0:
            raise ValueError("budgets must be >= 1")


@dataclass(frozen=True)
class Inside:
    """Ball certified inside U* with the smallest observed slack."""

    min_margin: float
    direction: np.ndarray = field(repr=False)

    inside = True


@dataclass(frozen=True)
class Outside:
    """Ball not inside U*; ``witness`` has negative slack ``slack``."""

    witness: np.ndarray
    slack: float

    inside = False


BallVerdict = Union[Inside, Outside]


def _refine(profile: UtilityProfile, x: np.ndarray, r: float, start: np.ndarray,
            value: float, step: float, sweeps: int) -> tuple[np.ndarray, float]:
    """Multi-coordinate descent of ``sigma(b) - b.x - r`` on the unit sphere."""
    n = x.shape[0]
    best, best_val = start.copy(), value
    for _ in range(sweeps):
        cands = []
        for i in range(n):
            for s in (1.0, -1.0):
                c = best.copy()
                c[i] = max(0.0, c[i] + s * step)
                norm = np.linalg.norm(c)
                if norm > 0:
                    cands.append(c / norm)
        C = np.array(cands)
        vals = support_values(profile, C) - C @ x - r
        k = int(np.argmin(vals))
        if vals[k] < best_val - 1e-16:
            best, best_val = C[k], float(vals[k])
        else:
            step *= 0.5
            if step < 1e-10:
                break
    return best, best_val


def ball_slack(profile: UtilityProfile, center, radius: float,
               direction_budget: int = DEFAULT_CONFIG.direction_budget,
               refinement_steps: int = DEFAULT_CONFIG.refinement_steps,
               starts: int = 4) -> tuple[float, np.ndarray]:
    """Smallest observed containment slack of ``B(center, radius)`` in U*.

    Returns ``(slack, direction)``. For the positivity constraints the
    direction is ``e_i`` with slack ``x_i - r``; otherwise it is the unit
    vector minimizing ``sigma(beta) - beta^T x - r`` found by the search.
    """
    x = np.asarray(center, dtype=float)
    n = profile.n
    grid = direction_grid(n, direction_budget)
    vals = _grid_support_cached(profile, direction_budget) - grid @ x - radius
    order = np.argsort(vals, kind="stable")
    best_dir, best_val = grid[order[0]].copy(), float(vals[order[0]])
    step = (math.pi / 2) / max(direction_budget, 2) if n == 2 else 2.0 / math.sqrt(direction_budget)
    seen: list[np.ndarray] = []
    for k in order:
        if len(seen) >= starts:
            break
        if any(np.linalg.norm(grid[k] - s) < 4 * step for s in seen):
            continue
        seen.append(grid[k])
        d, v = _refine(profile, x, radius, grid[k], float(vals[k]), step, refinement_steps)
        if v < best_val:
            best_dir, best_val = d, v
    low = int(np.argmin(x))
    if x[low] - radius < best_val:
        best_dir = np.eye(n)[low]
        best_val = float(x[low] - radius)
    return best_val, best_dir


def ball_in_ustar(profile: UtilityProfile, query: BallQuery,
                  required_slack: float | None = None) -> BallVerdict:
    """Decide whether ``B(query.center, query.radius)`` lies inside U*.

    A ball is inside U* iff ``min_i x_i >= r`` and
    ``sigma(beta) - beta^T x - r >= 0`` for every unit ``beta >= 0``. The
    second condition is searched on a deterministic direction grid with local
    refinement, and the verdict demands ``required_slack`` (default
    ``1e-6 * vbar``).
    """
    x = np.asarray(query.center, dtype=float)
    if x.shape[0] != profile.n:
        raise ValueError("center dimension mismatch")
    need = DEFAULT_CONFIG.required_slack * profile.vbar if required_slack is None else required_slack
    low = int(np.argmin(x))
    if x[low] < query.radius:
        return Outside(witness=np.eye(profile.n)[low], slack=float(x[low] - query.radius))
    slack, direction = ball_slack(profile, x, query.radius, query.direction_budget,
                                  query.refinement_steps)
    if slack >= need:
        return Inside(min_margin=slack, direction=direction)
    return Outside(witness=direction, slack=slack)


# ---------------------------------------------------------------------------
# Structural classification of agents
# ---------------------------------------------------------------------------


def _weighted_atoms(profile: UtilityProfile, i: int) -> tuple[np.ndarray, np.ndarray]:
    d = profile.dists[i]
    return profile.alpha[i] * d.atom_array, d.prob_array


def _prob_greater(profile: UtilityProfile, i: int, j: int, strict: bool) -> float:
    """``P(alpha_i u_i > alpha_j u_j)`` (or ``>=``) over independent atoms."""
    wi, pi = _weighted_atoms(profile, i)
    wj, pj = _weighted_atoms(profile, j)
    diff = wi[:, None] - wj[None, :]
    mask = diff > TIE_TOL if strict else diff >= -TIE_TOL
    return float(np.sum(pi[:, None] * pj[None, :] * mask))


def _weighted_interval(profile: UtilityProfile, i: int) -> tuple[float, float] | None:
    """Smallest interval holding the positive weighted values of agent i."""
    w, _ = _weighted_atoms(profile, i)
    pos = w[w > TIE_TOL]
    if pos.size == 0:
        return None
    return float(pos[0]), float(pos[-1])


def _condition_2b(profile: UtilityProfile, i: int) -> bool:
    """Interval-exclusivity condition of the trivial-case characterization.

    Agent i passes when its positive weighted values fit in an interval
    ``[m_i, M_i]`` whose interior carries no weighted atom of another agent.
    An interval shared exactly with another nondegenerate agent does not
    count as exclusive: both agents then tie at both endpoints and neither
    can sit in a hierarchy.
    """
    iv = _weighted_interval(profile, i)
    if iv is None:
        return True
    m, M = iv
    for j in range(profile.n):
        if j == i:
            continue
        wj, _ = _weighted_atoms(profile, j)
        if np.any((wj > m + TIE_TOL) & (wj < M - TIE_TOL)):
            return False
        if M - m > TIE_TOL:
            jv = _weighted_interval(profile, j)
            if jv is not None and abs(jv[0] - m) <= TIE_TOL and abs(jv[1] - M) <= TIE_TOL:
                return False
    return True


@dataclass(frozen=True)
class AgentSets:
    """Index sets I, J, K and I-tilde (zero-based agent indices)."""

    I: tuple[int, ...]
    J: tuple[int, ...]
    K: tuple[int, ...]
    I_tilde: tuple[int, ...]
    J_ordering: tuple[tuple[int, float, float], ...]
    base_level: float


def _tie_at_max_probability(profile: UtilityProfile, i: int) -> float:
    """``P(alpha_i u_i = max_{j != i} alpha_j u_j > 0)`` from marginal CDFs."""
    wi, pi = _weighted_atoms(profile, i)
    total = 0.0
    for t, p in zip(wi, pi):
        if t <= TIE_TOL:
            continue
        below_or_eq = 1.0
        strictly_below = 1.0
        for j in range(profile.n):
            if j == i:
                continue
            wj, pj = _weighted_atoms(profile, j)
            below_or_eq *= float(np.sum(pj[wj <= t + TIE_TOL]))
            strictly_below *= float(np.sum(pj[wj < t - TIE_TOL]))
        total += p * (below_or_eq - strictly_below)
    return total


def agent_sets(profile: UtilityProfile) -> AgentSets:
    """Compute the structural agent sets by exact checks on atom pairs.

    I holds agents that beat every other agent with positive probability and
    lack an exclusive weighted interval; J holds the remaining agents that
    beat everyone; K holds agents outside I and J that weakly beat everyone;
    I-tilde adds to I every agent that ties at a positive maximum with
    positive probability.
    """
    n = profile.n
    if n == 1:
        return AgentSets(I=(), J=(0,), K=(), I_tilde=(), J_ordering=(), base_level=0.0)
    beats = [[i == j or _prob_greater(profile, i, j, True) > 0 for j in range(n)] for i in range(n)]
    weak = [[i == j or _prob_greater(profile, i, j, False) > 0 for j in range(n)] for i in range(n)]
    beats_all = [all(beats[i]) for i in range(n)]
    I = tuple(i for i in range(n) if beats_all[i] and not _condition_2b(profile, i))
    J = tuple(i for i in range(n) if i not in I and beats_all[i])
    K = tuple(i for i in range(n) if i not in I and i not in J and all(weak[i]))
    ties = tuple(i for i in range(n) if i not in I and _tie_at_max_probability(profile, i) > 0)
    I_tilde = tuple(sorted(set(I) | set(ties)))
    ordering = []
    for j in J:
        iv = _weighted_interval(profile, j)
        m, M = iv if iv is not None else (0.0, 0.0)
        ordering.append((j, m, M))
    ordering.sort(key=lambda t: (t[1], t[2], t[0]))
    base = 0.0
    if K:
        base = float(max(_weighted_atoms(profile, k)[0][-1] for k in K))
    return AgentSets(I=I, J=J, K=K, I_tilde=I_tilde, J_ordering=tuple(ordering),
                     base_level=base)


@dataclass(frozen=True)
class DominantAgent:
    """Scenario in which one agent always has the largest weighted utility."""

    agent: int


@dataclass(frozen=True)
class Hierarchy:
    """Scenario in which agents are served in a fixed order of zero-mass gates.

    ``thresholds[l]`` is the smallest positive weighted value of ``order[l]``.
    """

    order: tuple[int, ...]
    thresholds: tuple[float, ...]


@dataclass(frozen=True)
class TrivialCaseReport:
    """Outcome of :func:`classify_trivial`."""

    case: DominantAgent | Hierarchy | None
    optimal_single_shot: object | None = None
    alpha_optimal_vector: np.ndarray | None = None


def _find_hierarchy(profile: UtilityProfile) -> tuple[int, ...] | None:
    """Greedy search for an order of zero-mass gates serving everyone optimally.

    The next agent must have every positive weighted value at least as large
    as every weighted value of the agents still unplaced. The sequence stops
    at an agent that is never zero, or when one agent is left.
    """
    alpha = profile.alpha
    remaining = list(range(profile.n))
    order: list[int] = []
    while remaining:
        chosen = None
        silent = [i for i in remaining if profile.dists[i].min_positive_atom == math.inf]
        pool = [i for i in remaining if i not in silent] or silent
        for i in pool:
            d = profile.dists[i]
            gate = alpha[i] * d.min_positive_atom if alpha[i] > 0 else (
                math.inf if d.min_positive_atom == math.inf else 0.0)
            others = [alpha[j] * profile.dists[j].max_atom for j in remaining if j != i]
            if all(gate >= o - TIE_TOL for o in others):
                chosen = i
                break
        if chosen is None:
            return None
        order.append(chosen)
        remaining.remove(chosen)
        if profile.dists[chosen].zero_mass == 0.0 or not remaining:
            return tuple(order)
    return tuple(order)


def hierarchy_table_entries(profile: UtilityProfile, order: Sequence[int]) -> np.ndarray:
    """Allocation to the first agent in ``order`` with positive utility.

    When every agent in ``order`` reports zero the last one is served.
    """
    joint = profile.joint()
    entries = np.zeros((joint.size, profile.n))
    assigned = np.zeros(joint.size, dtype=bool)
    for agent in order[:-1]:
        hit = (~assigned) & (joint.values[:, agent] > 0)
        entries[hit, agent] = 1.0
        assigned |= hit
    entries[~assigned, order[-1]] = 1.0
    return entries


def classify_trivial(profile: UtilityProfile) -> TrivialCaseReport:
    """Detect whether a single-shot mechanism is already alpha-optimal.

    Scenario (a): one agent weakly dominates all others surely. Scenario (b):
    agents form a hierarchy where agent ``i_l`` is served whenever it reports
    a positive value and all earlier agents report zero. When detected, the
    report carries the single-shot table and its realized vector, whose
    alpha-gap is zero.
    """
    from .realize import AllocationTable, realized_utilities

    order = _find_hierarchy(profile)
    if order is None:
        return TrivialCaseReport(case=None)
    table = AllocationTable(profile, hierarchy_table_entries(profile, order))
    vector = realized_utilities(table)
    if len(order) == 1:
        case: DominantAgent | Hierarchy = DominantAgent(order[0])
    else:
        thresholds = tuple(profile.alpha[i] * profile.dists[i].min_positive_atom
                           for i in order[:-1])
        case = Hierarchy(order=order, thresholds=thresholds)
    return TrivialCaseReport(case=case, optimal_single_shot=table, alpha_optimal_vector=vector)


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PruneResult:
    """Result of the pruning normalization of a utility vector."""

    pruned_indices: tuple[int, ...]
    U_tilde: np.ndarray
    J_of_U: tuple[int, ...]
    scale: float


SATURATION_TOL = 1e-12


def prune(profile: UtilityProfile, U) -> PruneResult:
    """Remove saturated agents and rescale by their zero-utility mass.

    An agent is saturated when its promised utility reaches ``E[u_i]``; it
    must then be served whenever its utility is positive, so the rest of the
    problem lives on the event ``u_i = 0``, of probability ``P(u_i = 0)``.

    Raises
    ------
    NotInRegion
        When some coordinate is negative or exceeds ``E[u_i]`` (up to 1e-12),
        or when rescaling pushes a coordinate beyond its maximum.
    """
    U = np.asarray(U, dtype=float).copy()
    E = profile.means
    if U.shape != E.shape:
        raise ValueError("dimension mismatch")
    if np.any(U > E + SATURATION_TOL) or np.any(U < -SATURATION_TOL):
        raise NotInRegion("utility vector outside the per-agent bounds")
    U = np.clip(U, 0.0, None)
    support = tuple(i for i in range(profile.n) if U[i] > 0)
    current = U.copy()
    pruned: list[int] = []
    scale = 1.0
    while True:
        candidates = [i for i in support if i not in pruned and current[i] >= E[i] - SATURATION_TOL]
        if not candidates:
            break
        i = candidates[0]
        pruned.append(i)
        p0 = profile.dists[i].zero_mass
        scale *= p0
        if p0 == 0.0:
            current = np.zeros_like(current)
            break
        current = (current - E[i] * np.eye(profile.n)[i]) / p0
        current[i] = 0.0
        if np.any(current > E + 1e-9):
            raise NotInRegion("rescaled vector exceeds per-agent maximum; U is not in U*")
        current = np.clip(current, 0.0, None)
    J = tuple(i for i in support if current[i] > 0)
    current.flags.writeable = False
    return PruneResult(pruned_indices=tuple(pruned), U_tilde=current, J_of_U=J, scale=scale)
