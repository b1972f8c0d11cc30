"""Full-information allocation tables and the realization problem.

An allocation table assigns a point of the simplex to every joint outcome.
This module computes realized and interim quantities exactly and solves the
feasibility problem "find a table whose realized utilities equal V" with
Wolfe's minimum-norm-point method over the vertex tables of U*.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO, Union

import numpy as np

from .dist import DiscreteDist, UtilityProfile
from .errors import SolverStall
from .geometry import ustar_support

ENTRY_TOL = 1e-12
TIE_REL_TOL = 1e-12


@dataclass(frozen=True)
class UniformSplit:
    """Split the resource equally among all weighted maximizers."""


@dataclass(frozen=True)
class FixedPriority:
    """Give the resource to the first maximizer in ``order``."""

    order: tuple[int, ...]


TieRule = Union[UniformSplit, FixedPriority]


class AllocationTable:
    """A full-information allocation rule on the joint support.

    Parameters
    ----------
    profile : UtilityProfile
        The instance whose joint support indexes the rows.
    entries : numpy.ndarray
        ``(N, n)`` array; row ``o`` is the allocation on joint outcome ``o``
        (C order over atom indices). Rows must lie in the simplex
        ``{p >= 0, sum p <= 1}`` within 1e-12.
    """

    __slots__ = ("profile", "entries")

    def __init__(self, profile: UtilityProfile, entries: np.ndarray):
        arr = np.array(entries, dtype=float)
        joint = profile.joint()
        if arr.shape != (joint.size, profile.n):
            raise ValueError(f"table shape {arr.shape} != {(joint.size, profile.n)}")
        if np.any(arr < -ENTRY_TOL) or np.any(arr.sum(axis=1) > 1 + ENTRY_TOL):
            raise ValueError("table rows must lie in the simplex")
        arr.flags.writeable = False
        self.profile = profile
        self.entries = arr

    def __repr__(self) -> str:
        return f"AllocationTable(n={self.profile.n}, outcomes={self.entries.shape[0]})"


def _first_best_entries(profile: UtilityProfile, beta: np.ndarray, tie_rule: TieRule) -> np.ndarray:
    joint = profile.joint()
    active = beta > 0
    weighted = np.where(active, joint.values * beta, -np.inf)
    top = np.max(weighted, axis=1, keepdims=True)
    winners = (weighted >= top - TIE_REL_TOL * np.abs(top)) & active
    if isinstance(tie_rule, UniformSplit):
        return winners / winners.sum(axis=1, keepdims=True)
    order = list(tie_rule.order) + [i for i in range(profile.n) if i not in tie_rule.order]
    entries = np.zeros(weighted.shape)
    taken = np.zeros(weighted.shape[0], dtype=bool)
    for i in order:
        hit = winners[:, i] & ~taken
        entries[hit, i] = 1.0
        taken |= hit
    return entries


def first_best_table(profile: UtilityProfile, beta, tie_rule: TieRule | None = None) -> AllocationTable:
    """Allocate to a maximizer of ``beta_i u_i`` on every joint outcome.

    Only agents with ``beta_i > 0`` are eligible. The realized weighted
    welfare equals the support value ``E[max_i beta_i u_i]``.
    """
    b = np.asarray(beta, dtype=float)
    if b.shape != (profile.n,) or np.any(b < 0) or not np.any(b > 0):
        raise ValueError("beta must be nonnegative, nonzero, one entry per agent")
    rule = UniformSplit() if tie_rule is None else tie_rule
    return AllocationTable(profile, _first_best_entries(profile, b, rule))


def constant_table(profile: UtilityProfile, q) -> AllocationTable:
    """Table that ignores reports and always uses the allocation ``q``."""
    q = np.asarray(q, dtype=float)
    return AllocationTable(profile, np.tile(q, (profile.joint().size, 1)))


def realized_entries(profile: UtilityProfile, entries: np.ndarray) -> np.ndarray:
    """Realized utilities ``E[u_i p_i(u)]`` of a raw entry array."""
    joint = profile.joint()
    return (joint.probs[:, None] * joint.values * entries).sum(axis=0)


def realized_utilities(table: AllocationTable) -> np.ndarray:
    """Exact vector ``(E[u_i p_i(u)])_i`` of a table."""
    return realized_entries(table.profile, table.entries)


# ---------------------------------------------------------------------------
# Interim allocations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InterimAllocation:
    """Interim allocation ``P_i`` of one agent, as a step function.

    ``values[k]`` is the probability that agent ``agent`` is served when it
    reports its ``k``-th atom. Between atoms the function is extended as a
    right-continuous step function; reports below the first atom use the
    first value.
    """

    agent: int
    dist: DiscreteDist
    values: np.ndarray = field(repr=False)

    @property
    def breakpoints(self) -> np.ndarray:
        return self.dist.atom_array

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.values) >= -1e-12))

    def snap(self, v) -> np.ndarray:
        """Atom index used for report ``v`` (nearest atom at or below)."""
        pos = np.searchsorted(self.dist.atom_array, np.asarray(v, dtype=float), side="right") - 1
        return np.maximum(pos, 0)

    def __call__(self, v):
        out = self.values[self.snap(v)]
        return float(out) if np.ndim(out) == 0 else out


def interim_from_entries(profile: UtilityProfile, entries: np.ndarray, i: int) -> np.ndarray:
    """Interim allocation of agent ``i`` at each of its atoms."""
    joint = profile.joint()
    d = profile.dists[i]
    mass = np.bincount(joint.index[:, i], weights=joint.probs * entries[:, i], minlength=d.size)
    return mass / d.prob_array


def interim_allocation(table: AllocationTable, i: int) -> InterimAllocation:
    """Exact marginal ``P_i(v) = E_{u_-i}[p_i(v, u_-i)]`` at each atom of agent ``i``."""
    vals = interim_from_entries(table.profile, table.entries, i)
    vals.flags.writeable = False
    return InterimAllocation(agent=i, dist=table.profile.dists[i], values=vals)


# ---------------------------------------------------------------------------
# Realization by Wolfe's minimum-norm-point method
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Infeasible:
    """Target outside U*, separated by ``witness``.

    ``violation = witness^T V - sigma(witness^+) > 0``.
    """

    witness: np.ndarray
    violation: float
    distance: float


@dataclass(frozen=True)
class RealizeResult:
    """Feasible realization together with its vertex decomposition."""

    table: AllocationTable
    weights: np.ndarray
    vertices: tuple[np.ndarray, ...] = field(repr=False)
    iterations: int
    residual: float


def _lmo_entries(profile: UtilityProfile, c: np.ndarray) -> np.ndarray:
    """Vertex table maximizing ``c^T realized(T)``: first best on ``c^+``.

    Agents with nonpositive direction entries never receive the resource,
    and ties go to the lowest index, so the table is a vertex of the region.
    """
    joint = profile.joint()
    bp = np.maximum(c, 0.0)
    entries = np.zeros((joint.size, profile.n))
    if not np.any(bp > 0):
        return entries
    return _first_best_entries(profile, bp, FixedPriority(tuple(range(profile.n))))


def _affine_minimizer(points: np.ndarray) -> np.ndarray:
    """Weights ``a`` (summing to 1) minimizing ``|points^T a|``."""
    m = points.shape[0]
    if m == 1:
        return np.ones(1)
    kkt = np.zeros((m + 1, m + 1))
    kkt[:m, :m] = points @ points.T
    kkt[:m, m] = 1.0
    kkt[m, :m] = 1.0
    rhs = np.zeros(m + 1)
    rhs[m] = 1.0
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    a = sol[:m]
    return a / a.sum()


def no_information_pool(profile: UtilityProfile) -> list[np.ndarray]:
    """Entry arrays of the no-information vertices: serve agent i always."""
    N = profile.joint().size
    pool = []
    for i in range(profile.n):
        e = np.zeros((N, profile.n))
        e[:, i] = 1.0
        pool.append(e)
    return pool


def realize_point_detailed(profile: UtilityProfile, V, tol: float = 1e-9,
                           max_iter: int = 10_000,
                           pool: Sequence[np.ndarray] | None = None) -> Union[RealizeResult, Infeasible]:
    """Realize ``V`` as a convex combination of vertex tables.

    Wolfe's method walks the minimum-norm point of the hull of an active set
    of vertices (shifted by ``-V``). New vertices come first from ``pool``
    (by default the no-information vertices, which keep realizations of
    points near the no-information region close to report-independent
    tables) and otherwise from the first-best linear oracle.

    Raises
    ------
    SolverStall
        After ``max_iter`` major iterations without a verdict.
    """
    V = np.asarray(V, dtype=float)
    if V.shape != (profile.n,):
        raise ValueError("target dimension mismatch")
    joint = profile.joint()
    weight = joint.probs[:, None] * joint.values

    def point(entries: np.ndarray) -> np.ndarray:
        return (weight * entries).sum(axis=0) - V

    zero = np.zeros((joint.size, profile.n))
    pool_entries = list(no_information_pool(profile) if pool is None else pool)
    pool_points = [point(e) for e in pool_entries]
    used = [False] * len(pool_entries)

    S_entries = [zero]
    S_points = [point(zero)]
    lam = np.ones(1)
    x = S_points[0].copy()
    scale = max(1.0, float(np.max(np.abs(V))), profile.vbar)
    gap_eps = 1e-15 * scale * scale

    for it in range(max_iter):
        if np.max(np.abs(x)) <= tol:
            entries = sum(l * e for l, e in zip(lam, S_entries))
            table = AllocationTable(profile, np.clip(entries, 0.0, 1.0))
            return RealizeResult(table=table, weights=lam.copy(), vertices=tuple(S_entries),
                                 iterations=it, residual=float(np.max(np.abs(x))))
        xx = float(x @ x)
        new_entries, new_point, new_k = None, None, -1
        for k, (e, p) in enumerate(zip(pool_entries, pool_points)):
            if not used[k] and xx - float(x @ p) > gap_eps:
                if new_entries is None or float(x @ p) < float(x @ new_point):
                    new_entries, new_point, new_k = e, p, k
        if new_entries is not None:
            used[new_k] = True
        else:
            cand = _lmo_entries(profile, -x)
            cand_point = point(cand)
            if xx - float(x @ cand_point) <= gap_eps:
                norm = float(np.sqrt(xx))
                witness = -x / norm
                violation = float(witness @ V) - ustar_support(profile, witness)
                return Infeasible(witness=witness, violation=violation, distance=norm)
            new_entries, new_point = cand, cand_point
        S_entries.append(new_entries)
        S_points.append(new_point)
        lam = np.append(lam, 0.0)
        while True:
            P = np.array(S_points)
            a = _affine_minimizer(P)
            if np.all(a > 1e-14):
                lam = a
                break
            mask = (a <= 1e-14) & (lam - a > 0)
            theta = float(np.min(lam[mask] / (lam[mask] - a[mask]))) if np.any(mask) else 0.0
            theta = min(max(theta, 0.0), 1.0)
            lam = theta * a + (1.0 - theta) * lam
            keep = lam > 1e-14
            if not np.any(keep):
                keep[int(np.argmax(lam))] = True
            S_entries = [e for e, k in zip(S_entries, keep) if k]
            S_points = [p for p, k in zip(S_points, keep) if k]
            lam = lam[keep] / lam[keep].sum()
            if len(S_points) == 1:
                break
        x = lam @ np.array(S_points)
    raise SolverStall(f"realize_point did not converge in {max_iter} iterations")


def realize_point(profile: UtilityProfile, V, tol: float = 1e-9, max_iter: int = 10_000,
                  pool: Sequence[np.ndarray] | None = None) -> Union[AllocationTable, Infeasible]:
    """Find a table realizing ``V`` within ``tol``, or a separating direction.

    Returns an :class:`AllocationTable` when feasible and an
    :class:`Infeasible` verdict (with ``witness^T V > sigma(witness) + tol``
    up to solver precision) otherwise.
    """
    res = realize_point_detailed(profile, V, tol=tol, max_iter=max_iter, pool=pool)
    return res.table if isinstance(res, RealizeResult) else res


# ---------------------------------------------------------------------------
# One-shot optimum and export
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OneShotOptimum:
    """Best alpha-weighted welfare among single-round truthful tables."""

    value: float
    vector: np.ndarray
    table: AllocationTable


def one_shot_optimum(profile: UtilityProfile, alpha=None) -> OneShotOptimum:
    """Maximize ``alpha^T U`` over tables that are truthful in a single round.

    Without continuation promises, truthfulness forces each interim
    allocation to be constant on positive atoms and no larger at zero. The
    resulting linear program is solved with ``scipy.optimize.linprog``.
    """
    from scipy.optimize import linprog

    a = profile.alpha_array if alpha is None else np.asarray(alpha, dtype=float)
    joint = profile.joint()
    N, n = joint.size, profile.n
    nv = N * n
    weight = joint.probs[:, None] * joint.values
    c = -(weight * a).reshape(-1)
    A_ub = np.zeros((N, nv))
    for o in range(N):
        A_ub[o, o * n:(o + 1) * n] = 1.0
    b_ub = np.ones(N)
    eq_rows, ub_rows = [], []
    for i, d in enumerate(profile.dists):
        rows = []
        for k in range(d.size):
            row = np.zeros(nv)
            hit = np.nonzero(joint.index[:, i] == k)[0]
            row[hit * n + i] = joint.probs[hit] / d.probs[k]
            rows.append(row)
        positive = [k for k in range(d.size) if d.atoms[k] > 0]
        for k in positive[1:]:
            eq_rows.append(rows[k] - rows[positive[0]])
        if positive and d.atoms[0] == 0:
            ub_rows.append(rows[0] - rows[positive[0]])
    A_ub = np.vstack([A_ub] + ub_rows) if ub_rows else A_ub
    b_ub = np.concatenate([b_ub, np.zeros(len(ub_rows))])
    A_eq = np.array(eq_rows) if eq_rows else None
    b_eq = np.zeros(len(eq_rows)) if eq_rows else None
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=(0, 1), method="highs")
    if res.status != 0:
        raise SolverStall(f"one-shot program failed: {res.message}")
    entries = np.clip(res.x.reshape(N, n), 0.0, 1.0)
    row_sum = entries.sum(axis=1, keepdims=True)
    entries = np.where(row_sum > 1.0, entries / row_sum, entries)
    table = AllocationTable(profile, entries)
    vector = realized_utilities(table)
    return OneShotOptimum(value=float(a @ vector), vector=vector, table=table)


def table_rows(table: AllocationTable) -> Iterable[list]:
    joint = table.profile.joint()
    for o in range(joint.size):
        yield [int(j) for j in joint.index[o]] + [float(joint.probs[o])] + [float(p) for p in table.entries[o]]


def table_to_csv(table: AllocationTable, fh: TextIO | None = None) -> str:
    """Write one row per joint outcome: atom indices, probability, allocation."""
    n = table.profile.n
    buf = io.StringIO() if fh is None else fh
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"atom{i}" for i in range(n)] + ["prob"] + [f"p{i}" for i in range(n)])
    for row in table_rows(table):
        writer.writerow([v if isinstance(v, int) else format(v, ".17g") for v in row])
    return buf.getvalue() if fh is None else ""
