"""Promised-utility mechanisms and their verifiers.

A promised-utility mechanism keeps a state ``U`` (the utility vector still
owed to the agents). Each round it maps reports to an allocation and to a next
promise ``W``, subject to three contracts:

* promise keeping: ``U = E[(1 - gamma) u * p + gamma * W]``;
* valid promises: every ``W`` is again a state the mechanism can serve;
* incentive compatibility: truthful reporting maximizes
  ``(1 - gamma) u P_i(v) + gamma W_i(v)`` over reports ``v``.

The ball mechanism serves the region ``R`` of points dominated by the convex
hull of the no-information vertices ``E[u_i] e_i`` and a ball ``B(x, r)``.
For a boundary point ``x + r d`` it plays the full-information table realizing
``x + (r + delta) d`` and promises interim values coupled onto the hyperplane
orthogonal to ``d``. Other states are handled through a decomposition over
these generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Protocol, Sequence

import numpy as np

from .config import DEFAULT_CONFIG, Config
from .dist import UtilityProfile
from .errors import (
    DegenerateCenter,
    MarginViolated,
    NotInUstar,
    ScheduleInfeasible,
    StateOutsideRegion,
    ZeroDirection,
)
from .geometry import BallQuery, Outside, ball_in_ustar, direction_grid, no_info_value, support_value
from .realize import (
    AllocationTable,
    InterimAllocation,
    RealizeResult,
    interim_from_entries,
    no_information_pool,
    realize_point_detailed,
    realized_utilities,
)

DECOMP_TOL = 1e-12
COUPLE_ZERO = 1e-300


# ---------------------------------------------------------------------------
# Constants of the safe-margin chain
# ---------------------------------------------------------------------------


def margin_constant(profile: UtilityProfile, x, r: float,
                    assume_lower_bound: float | None = None) -> float:
    """Constant ``C`` of the safe-margin chain.

    General case: ``4 n^2 vbar^2 (1 + max E[u] / min(E[u] - x - r))^2``.
    When every atom is at least ``vlow > 0``:
    ``vbar^2 (2 n + vbar / vlow)^2``. The smaller applicable value is
    returned.

    Raises
    ------
    DegenerateCenter
        When ``E[u_i] - x_i - r <= 0`` for some i and no lower bound is given.
    """
    x = np.asarray(x, dtype=float)
    n, vbar = profile.n, profile.vbar
    E = profile.means
    values = []
    room = E - x - r
    if np.all(room > 0):
        values.append(4 * n * n * vbar * vbar * (1 + float(np.max(E)) / float(np.min(room))) ** 2)
    if assume_lower_bound is not None:
        vlow = float(assume_lower_bound)
        if vlow <= 0 or any(d.atoms[0] < vlow for d in profile.dists):
            raise ValueError("lower bound must be positive and below every atom")
        values.append(vbar * vbar * (2 * n + vbar / vlow) ** 2)
    if not values:
        raise DegenerateCenter("E[u_i] - x_i - r <= 0 for some agent and no lower bound given")
    return min(values)


def safe_margin_bounds(r: float, gamma: float, C: float) -> tuple[float, float]:
    """Interval ``[C (1 - gamma) / (gamma r), r gamma / (1 - gamma)]`` for delta."""
    return C * (1 - gamma) / (gamma * r), r * gamma / (1 - gamma)


# ---------------------------------------------------------------------------
# Coupling and interim promises
# ---------------------------------------------------------------------------


def couple_promises(tilde_W, means, alpha_dir, variant: str = "new") -> np.ndarray:
    """Couple interim promises onto the hyperplane ``alpha^T Z = alpha^T means``.

    Each coordinate keeps its own interim promise plus a mean-zero combination
    of the other coordinates' deviations, so ``E[Z_i | W_i] = W_i`` when the
    coordinates are independent.

    Parameters
    ----------
    tilde_W : array_like
        ``(n,)`` or ``(M, n)`` interim promises.
    means : array_like
        ``(n,)`` means of the interim promises.
    alpha_dir : array_like
        ``(n,)`` hyperplane normal.
    variant : {"new", "legacy"}
        ``"new"`` routes all corrections through the two largest ``|alpha|``
        entries ``i1, i2``: ``Z_i1 = W_i1 - sum_{i != i1} (alpha_i/alpha_i1)
        (W_i - m_i)``, ``Z_i2 = W_i2 - (alpha_i1/alpha_i2)(W_i1 - m_i1)``.
        ``"legacy"`` spreads them evenly over the ``m`` nonzero entries:
        ``Z_i = W_i - (1/(m-1)) sum_{j != i} (alpha_j/alpha_i)(W_j - m_j)``.

    Raises
    ------
    ZeroDirection
        When fewer than two entries of ``alpha_dir`` are nonzero.
    """
    W = np.asarray(tilde_W, dtype=float)
    single = W.ndim == 1
    W = np.atleast_2d(W)
    m = np.asarray(means, dtype=float)
    a = np.asarray(alpha_dir, dtype=float)
    dev = W - m
    Z = W.copy()
    nonzero = np.nonzero(np.abs(a) > COUPLE_ZERO)[0]
    if nonzero.size < 2:
        raise ZeroDirection("coupling needs at least two nonzero direction entries")
    if variant == "new":
        order = np.argsort(-np.abs(a), kind="stable")
        i1, i2 = int(order[0]), int(order[1])
        others = [i for i in range(a.shape[0]) if i != i1]
        Z[:, i1] = W[:, i1] - dev[:, others] @ (a[others] / a[i1])
        Z[:, i2] = W[:, i2] - (a[i1] / a[i2]) * dev[:, i1]
    elif variant == "legacy":
        k = nonzero.size
        weighted = dev[:, nonzero] * a[nonzero]
        total = weighted.sum(axis=1, keepdims=True)
        Z[:, nonzero] = W[:, nonzero] - (total - weighted) / ((k - 1) * a[nonzero])
    else:
        raise ValueError(f"unknown coupling variant {variant!r}")
    return Z[0] if single else Z


def _interim_terms(P: InterimAllocation) -> tuple[np.ndarray, float]:
    """Step-function integrals behind the interim promise.

    Returns ``h`` with ``h[k] = int_0^{a_k} P - P(a_k) a_k`` and the constant
    ``K = int_0^vbar Fbar(v) P(v) dv`` with ``Fbar`` the survival function.
    """
    a = P.dist.atom_array
    vals = np.asarray(P.values, dtype=float)
    widths = np.diff(a)
    below = np.concatenate([[0.0], np.cumsum(vals[:-1] * widths)]) + vals[0] * a[0]
    h = below - vals * a
    surv = 1.0 - P.dist.cdf_array
    K = vals[0] * a[0] + float(np.dot(vals[:-1] * surv[:-1], widths))
    return h, K


def interim_promise_atoms(P: InterimAllocation, U_i: float, gamma: float) -> np.ndarray:
    """Interim promise ``W_i`` at every atom of the agent."""
    h, K = _interim_terms(P)
    return (U_i + (1.0 - gamma) * (h - K)) / gamma


def interim_promise(P: InterimAllocation, U_i: float, gamma: float, v: float) -> float:
    """Interim promise that makes truthful reporting optimal and keeps ``U_i``.

    ``W_i(v) = (1/gamma) [U_i + (1 - gamma)(int_0^v P - P(v) v
    - int_0^vbar Fbar P)]`` with all integrals taken exactly over the step
    representation of ``P``.
    """
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    a = P.dist.atom_array
    h, K = _interim_terms(P)
    k = int(P.snap(v))
    vals = np.asarray(P.values, dtype=float)
    if v < a[0]:
        h_v = 0.0
    else:
        h_v = h[k] + vals[k] * a[k] - vals[k] * v + vals[k] * (v - a[k])
    return (U_i + (1.0 - gamma) * (h_v - K)) / gamma


# ---------------------------------------------------------------------------
# Boundary data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryData:
    """Table and promises for one boundary direction of the ball.

    Attributes
    ----------
    direction : numpy.ndarray
        Unit direction ``d``.
    state_point : numpy.ndarray
        Boundary state ``center + radius * d``.
    table_point : numpy.ndarray
        Target ``anchor + (radius + margin) * d`` realized by ``table``.
    table : AllocationTable
        Full-information allocation played at the boundary state.
    interim : tuple of numpy.ndarray
        Interim allocations at each agent's atoms.
    tilde_W : tuple of numpy.ndarray
        Interim promises at each agent's atoms.
    means : numpy.ndarray
        Expected interim promises.
    promises : numpy.ndarray
        ``(N, n)`` coupled next promises per joint outcome.
    """

    direction: np.ndarray
    state_point: np.ndarray
    table_point: np.ndarray
    table: AllocationTable = field(repr=False)
    interim: tuple[np.ndarray, ...] = field(repr=False)
    tilde_W: tuple[np.ndarray, ...] = field(repr=False)
    means: np.ndarray = field(repr=False)
    promises: np.ndarray = field(repr=False)


def build_boundary_data(profile: UtilityProfile, table: AllocationTable, state_point,
                        table_point, gamma: float, direction, variant: str = "new") -> BoundaryData:
    """Interim promises for ``table`` at ``state_point``, coupled along ``direction``."""
    joint = profile.joint()
    y = np.asarray(state_point, dtype=float)
    interim, tilde, means = [], [], np.empty(profile.n)
    for i, d in enumerate(profile.dists):
        vals = interim_from_entries(profile, table.entries, i)
        P = InterimAllocation(agent=i, dist=d, values=vals)
        w = interim_promise_atoms(P, y[i], gamma)
        interim.append(vals)
        tilde.append(w)
        means[i] = float(np.dot(d.prob_array, w))
    W = np.column_stack([tilde[i][joint.index[:, i]] for i in range(profile.n)])
    if profile.n == 1:
        Z = np.tile(means, (joint.size, 1))
    else:
        Z = couple_promises(W, means, -np.asarray(direction, dtype=float), variant)
    for arr in [Z, means, *interim, *tilde]:
        arr.flags.writeable = False
    return BoundaryData(direction=np.asarray(direction, dtype=float), state_point=y,
                        table_point=np.asarray(table_point, dtype=float), table=table,
                        interim=tuple(interim), tilde_W=tuple(tilde), means=means, promises=Z)


# ---------------------------------------------------------------------------
# States and the mechanism protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromiseState:
    """A promised utility vector with its decomposition over region generators.

    ``U = s * (q * E[u] + q0 * ytilde)`` componentwise, where ``ytilde`` is a
    boundary point of the mechanism's ball (absent when ``q0 == 0``).
    """

    U: np.ndarray
    s: np.ndarray
    q: np.ndarray
    q0: float
    key: Hashable | None
    direction: np.ndarray | None = None
    ytilde: np.ndarray | None = None

    def reconstruct(self, means: np.ndarray) -> np.ndarray:
        base = self.q * means
        if self.q0 > 0 and self.ytilde is not None:
            base = base + self.q0 * self.ytilde
        return self.s * base


@dataclass(frozen=True)
class BatchState:
    """Decompositions of many states at once.

    ``ids[m]`` is the boundary-data id of row ``m`` (``-1`` when the state
    has no ball component).
    """

    U: np.ndarray
    s: np.ndarray
    q: np.ndarray
    q0: np.ndarray
    ids: np.ndarray


class Mechanism(Protocol):
    """Interface shared by all executable mechanisms."""

    profile: UtilityProfile
    gamma: float

    def decompose(self, U) -> PromiseState: ...

    def outcome_arrays(self, state: PromiseState) -> tuple[np.ndarray, np.ndarray]: ...

    def respond_index(self, state: PromiseState, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...

    def promise_slack(self, state: PromiseState, promises: np.ndarray) -> np.ndarray: ...


def _flat_index(profile: UtilityProfile, idx: np.ndarray) -> np.ndarray:
    idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
    return np.ravel_multi_index(tuple(idx.T), profile.shape)


def snap_reports(profile: UtilityProfile, values) -> np.ndarray:
    """Atom indices for reported values (nearest atom at or below)."""
    V = np.atleast_2d(np.asarray(values, dtype=float))
    out = np.empty(V.shape, dtype=np.int64)
    for i, d in enumerate(profile.dists):
        pos = np.searchsorted(d.atom_array, V[:, i], side="right") - 1
        out[:, i] = np.maximum(pos, 0)
    return out


class StationaryMechanism:
    """Play one table forever and promise the same utility vector.

    With ``W = U`` promise keeping holds for any table; incentive
    compatibility at ``gamma`` reduces to single-round truthfulness.
    """

    def __init__(self, profile: UtilityProfile, table: AllocationTable, gamma: float = 0.0):
        self.profile = profile
        self.table = table
        self.gamma = float(gamma)
        self.vector = realized_utilities(table)

    def decompose(self, U=None) -> PromiseState:
        U = self.vector if U is None else np.asarray(U, dtype=float)
        if not np.allclose(U, self.vector, atol=1e-12):
            raise StateOutsideRegion("stationary mechanism serves a single promise")
        n = self.profile.n
        return PromiseState(U=self.vector, s=np.ones(n), q=np.zeros(n), q0=0.0, key="stationary")

    def outcome_arrays(self, state: PromiseState):
        N = self.table.entries.shape[0]
        return self.table.entries, np.tile(self.vector, (N, 1))

    def respond_index(self, state: PromiseState, idx: np.ndarray):
        flat = _flat_index(self.profile, idx)
        return self.table.entries[flat], np.tile(self.vector, (flat.shape[0], 1))

    def promise_slack(self, state: PromiseState, promises: np.ndarray) -> np.ndarray:
        return -np.max(np.abs(promises - self.vector), axis=1)

    def decompose_batch(self, U) -> BatchState:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if not np.allclose(U, self.vector, atol=1e-12):
            raise StateOutsideRegion("stationary mechanism serves a single promise")
        M, n = U.shape
        return BatchState(U=U, s=np.ones((M, n)), q=np.zeros((M, n)), q0=np.zeros(M),
                          ids=np.full(M, -1))

    def respond_batch(self, batch: BatchState, idx: np.ndarray):
        flat = _flat_index(self.profile, idx)
        return self.table.entries[flat], np.tile(self.vector, (flat.shape[0], 1))


class NoInformationMechanism:
    """Report-independent mechanism on the no-information region.

    State ``U`` with ``sum U_i / E[u_i] <= 1`` is served by the constant
    allocation ``q_i = U_i / E[u_i]`` and the promise ``W = U``.
    """

    def __init__(self, profile: UtilityProfile, gamma: float):
        self.profile = profile
        self.gamma = float(gamma)

    def decompose(self, U) -> PromiseState:
        U = np.asarray(U, dtype=float)
        E = self.profile.means
        q = np.where(E > 0, U / np.where(E > 0, E, 1.0), 0.0)
        if np.any(U < -DECOMP_TOL) or q.sum() > 1 + 1e-10:
            raise StateOutsideRegion("state is outside the no-information region")
        n = self.profile.n
        return PromiseState(U=U.copy(), s=np.ones(n), q=np.clip(q, 0, None), q0=0.0, key=None)

    def outcome_arrays(self, state: PromiseState):
        N = self.profile.joint().size
        return np.tile(state.q, (N, 1)), np.tile(state.U, (N, 1))

    def respond_index(self, state: PromiseState, idx: np.ndarray):
        M = np.atleast_2d(idx).shape[0]
        return np.tile(state.q, (M, 1)), np.tile(state.U, (M, 1))

    def promise_slack(self, state: PromiseState, promises: np.ndarray) -> np.ndarray:
        E = self.profile.means
        return 1.0 - np.sum(promises / E, axis=1)

    def decompose_batch(self, U) -> BatchState:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        E = self.profile.means
        q = U / E
        if np.any(U < -DECOMP_TOL) or np.any(q.sum(axis=1) > 1 + 1e-10):
            raise StateOutsideRegion("state is outside the no-information region")
        M, n = U.shape
        return BatchState(U=U, s=np.ones((M, n)), q=np.clip(q, 0, None), q0=np.zeros(M),
                          ids=np.full(M, -1))

    def respond_batch(self, batch: BatchState, idx: np.ndarray):
        return batch.q.copy(), batch.U.copy()


# ---------------------------------------------------------------------------
# Decomposition over the region generators
# ---------------------------------------------------------------------------


def _subset_matrix(n: int) -> np.ndarray:
    """``(n, 2^n)`` indicator matrix of all subsets of ``range(n)``."""
    codes = np.arange(2 ** n)
    return ((codes[None, :] >> np.arange(n)[:, None]) & 1).astype(float)


def _max_q0(U: np.ndarray, Y: np.ndarray, E: np.ndarray, chunk_elems: int = 4_000_000) -> np.ndarray:
    """Largest ``q0`` in [0, 1] with ``q0 + sum_i max(0, (U_i - q0 Y_ki)/E_i) <= 1``.

    Returns an ``(M, K)`` array, ``-inf`` where no such ``q0`` exists. A sum
    of positive parts is the maximum over subsets ``A`` of the affine maps
    ``q0 (1 - sum_A Y_i/E_i) + sum_A U_i/E_i``, so the feasible set is an
    intersection of half-lines and its right end is a minimum of ratios.
    """
    M, n = U.shape
    K = Y.shape[0]
    out = np.full((M, K), -np.inf)
    if K == 0 or M == 0:
        return out
    S = _subset_matrix(n)
    num = 1.0 - (U / E) @ S
    slope = 1.0 - (Y / E) @ S
    pos = slope > 1e-15
    neg = slope < -1e-15
    flat = ~(pos | neg)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(pos | neg, 1.0 / slope, 0.0)
    rows = max(1, chunk_elems // (K * S.shape[1]))
    for start in range(0, M, rows):
        nm = num[start:start + rows][:, None, :]
        ratio = nm * inv[None]
        upper = np.min(np.where(pos[None], ratio, np.inf), axis=2)
        lower = np.max(np.where(neg[None], ratio, -np.inf), axis=2)
        level = np.min(np.where(flat[None], nm, np.inf), axis=2)
        hi = np.minimum(upper, 1.0)
        ok = (np.maximum(lower, 0.0) <= hi + 1e-13) & (level >= -1e-13) & (hi >= -1e-13)
        out[start:start + rows] = np.where(ok, np.clip(hi, 0.0, 1.0), -np.inf)
    return out


def _finish_decomposition(U: np.ndarray, q0: float, y: np.ndarray | None, E: np.ndarray):
    if y is None or q0 <= 0:
        q = np.where(E > 0, np.maximum(U, 0) / E, 0.0)
        z = q * E
        q0 = 0.0
    else:
        q = np.maximum(0.0, (U - q0 * y) / E)
        z = q * E + q0 * y
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(z > 0, U / z, 0.0)
    return np.clip(s, 0.0, 1.0), q, q0


def exposed_mask(directions: np.ndarray, center: np.ndarray, radius: float, E: np.ndarray) -> np.ndarray:
    """Directions whose boundary point is not dominated by the no-info region."""
    return directions @ center + radius >= np.max(directions * E, axis=1)


def exposed_directions(center, radius: float, E, count: int) -> np.ndarray:
    """Deterministic grid of about ``count`` exposed unit directions."""
    x = np.asarray(center, dtype=float)
    E = np.asarray(E, dtype=float)
    n = x.shape[0]
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        theta = np.linspace(0.0, math.pi / 2, 200_001)
        D = np.column_stack([np.cos(theta), np.sin(theta)])
        ok = exposed_mask(D, x, radius, E)
        if not np.any(ok):
            return np.zeros((0, 2))
        lo, hi = theta[np.argmax(ok)], theta[len(ok) - 1 - np.argmax(ok[::-1])]

        def f(t: float) -> float:
            d = np.array([math.cos(t), math.sin(t)])
            return float(d @ x + radius - np.max(d * E))

        from scipy.optimize import brentq

        step = theta[1] - theta[0]
        if lo > 0 and f(lo - step) < 0:
            lo = brentq(f, lo - step, lo, xtol=1e-15)
        if hi < math.pi / 2 and f(hi + step) < 0:
            hi = brentq(f, hi, hi + step, xtol=1e-15)
        angles = np.linspace(lo, hi, count) if count > 1 else np.array([(lo + hi) / 2])
        D = np.column_stack([np.cos(angles), np.sin(angles)])
        D = D[exposed_mask(D, x, radius, E) | True]
        return np.maximum(D, 0.0) / np.linalg.norm(np.maximum(D, 0.0), axis=1, keepdims=True)
    budget = count
    for _ in range(12):
        D = direction_grid(n, budget)
        D = D[exposed_mask(D, x, radius, E)]
        if D.shape[0] >= count:
            break
        budget *= 2
    return np.array(D)


# ---------------------------------------------------------------------------
# The ball mechanism
# ---------------------------------------------------------------------------


class BallMechanism:
    """Promised-utility mechanism on the region dominated by NI and a ball.

    Parameters
    ----------
    profile : UtilityProfile
    center, radius : region ball ``B(center, radius)``.
    margin : float
        Margin ``delta``: boundary state ``center + radius d`` plays the table
        realizing ``anchor + (radius + margin) d``.
    gamma : float
        Discount factor of the round served by this mechanism.
    C : float
        Constant used in the safe-margin chain (recorded for reporting).
    anchor : optional center of the table ball (defaults to ``center``).
    next_center, next_radius : ball in which next promises must land
        (default: the region ball).
    variant : coupling variant.
    grid : optional ``(K, n)`` array of exposed boundary directions.
    realize_tol : tolerance for realizing tables.
    table_cache : optional shared dict from table points to realizations.
    """

    def __init__(self, profile: UtilityProfile, center, radius: float, margin: float,
                 gamma: float, C: float = float("nan"), *, anchor=None, next_center=None,
                 next_radius: float | None = None, variant: str = "new",
                 grid: np.ndarray | None = None, realize_tol: float = DEFAULT_CONFIG.realize_tol,
                 table_cache: dict | None = None, config: Config = DEFAULT_CONFIG):
        self.profile = profile
        self.x = np.asarray(center, dtype=float)
        self.r = float(radius)
        self.delta = float(margin)
        self.gamma = float(gamma)
        self.C = float(C)
        self.anchor = self.x if anchor is None else np.asarray(anchor, dtype=float)
        self.next_center = self.x if next_center is None else np.asarray(next_center, dtype=float)
        self.next_radius = self.r if next_radius is None else float(next_radius)
        self.variant = variant
        self.realize_tol = realize_tol
        self.config = config
        E = profile.means
        if grid is None:
            grid = exposed_directions(self.x, self.r, E, config.grid_size(profile.n))
        self.grid = np.asarray(grid, dtype=float).reshape(-1, profile.n)
        self.grid.flags.writeable = False
        self._grid_points = self.x + self.r * self.grid
        self._boundary: dict[Hashable, BoundaryData] = {}
        self._exact_dirs: dict[Hashable, np.ndarray] = {}
        self._id_keys: list[Hashable] = []
        self._key_ids: dict[Hashable, int] = {}
        self._tables = {} if table_cache is None else table_cache

    # -- boundary data -------------------------------------------------------

    def direction_of(self, key: Hashable) -> np.ndarray:
        if isinstance(key, (int, np.integer)):
            return self.grid[int(key)]
        return self._exact_dirs[key]

    def boundary(self, key: Hashable) -> BoundaryData:
        """Boundary data for a grid index or an exact-direction key (lazy)."""
        data = self._boundary.get(key)
        if data is None:
            d = self.direction_of(key)
            y = self.x + self.r * d
            z = self.anchor + (self.r + self.delta) * d
            table = self._realize(z)
            data = build_boundary_data(self.profile, table, y, z, self.gamma, d, self.variant)
            self._boundary[key] = data
        return data

    def _realize(self, z: np.ndarray) -> AllocationTable:
        tkey = tuple(np.round(z, 15))
        table = self._tables.get(tkey)
        if table is None:
            res = realize_point_detailed(self.profile, z, tol=self.realize_tol,
                                         pool=no_information_pool(self.profile))
            if not isinstance(res, RealizeResult):
                raise NotInUstar("table target outside U*", res.witness, -res.violation)
            table = res.table
            self._tables[tkey] = table
        return table

    def build_all(self) -> None:
        """Construct boundary data for every grid direction."""
        for k in range(self.grid.shape[0]):
            self.boundary(k)

    def exact_key(self, d: np.ndarray) -> Hashable:
        d = np.asarray(d, dtype=float)
        key = ("exact",) + tuple(np.round(d, 14))
        if key not in self._exact_dirs:
            self._exact_dirs[key] = d.copy()
            self._id_keys.append(key)
            self._key_ids[key] = self.grid.shape[0] + len(self._id_keys) - 1
        return key

    def key_id(self, key: Hashable) -> int:
        if key is None:
            return -1
        if isinstance(key, (int, np.integer)):
            return int(key)
        return self._key_ids[key]

    def id_key(self, kid: int) -> Hashable:
        K = self.grid.shape[0]
        return int(kid) if kid < K else self._id_keys[kid - K]

    # -- batched execution ---------------------------------------------------

    def decompose_batch(self, U) -> BatchState:
        """Decompose many states; rows off the grid use :meth:`decompose`."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if np.any(U < -DECOMP_TOL):
            raise StateOutsideRegion("negative promised utility")
        U = np.clip(U, 0.0, None)
        M, n = U.shape
        E = self.profile.means
        ids = np.full(M, -1)
        q0 = np.zeros(M)
        if self.grid.shape[0] > 0:
            vals = self._grid_q0(U)
            k, best = self._choose(U, vals)
            ball = np.isfinite(best) & (best > DECOMP_TOL)
            ids[ball] = k[ball]
            q0[ball] = best[ball]
            missing = ~np.isfinite(best)
        else:
            missing = np.ones(M, dtype=bool)
        Y = np.zeros((M, n))
        has = ids >= 0
        Y[has] = self._grid_points[ids[has]]
        for m in np.nonzero(missing)[0]:
            st = self.decompose(U[m])
            ids[m] = self.key_id(st.key)
            q0[m] = st.q0
            if st.ytilde is not None:
                Y[m] = st.ytilde
        has = ids >= 0
        q = np.where(has[:, None], np.maximum(0.0, (U - q0[:, None] * Y) / E), U / E)
        z = q * E + q0[:, None] * Y
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(z > 0, U / z, 0.0)
        return BatchState(U=U, s=np.clip(s, 0.0, 1.0), q=q, q0=q0, ids=ids)

    def respond_batch(self, batch: BatchState, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Allocations and next promises for row-wise joint reports."""
        flat = _flat_index(self.profile, idx)
        E = self.profile.means
        alloc = batch.s * batch.q
        nxt = alloc * E
        for kid in np.unique(batch.ids[batch.ids >= 0]):
            rows = np.nonzero(batch.ids == kid)[0]
            data = self.boundary(self.id_key(int(kid)))
            w = batch.q0[rows, None] * batch.s[rows]
            alloc[rows] += w * data.table.entries[flat[rows]]
            nxt[rows] += w * data.promises[flat[rows]]
        return alloc, nxt

    # -- decomposition -------------------------------------------------------

    def _grid_q0(self, U: np.ndarray) -> np.ndarray:
        """Largest ``q0`` per state and grid direction.

        A state dominated componentwise by a boundary point has ``q0 = 1``
        there; for such rows the other directions are left at ``-inf`` since
        they cannot win the maximum. Remaining rows scan breakpoints.
        """
        Y = self._grid_points
        dom = np.all(U[:, None, :] <= Y[None] + 1e-15, axis=2)
        hit = dom.any(axis=1)
        out = np.where(dom, 1.0, -np.inf)
        rest = np.nonzero(~hit)[0]
        if rest.size:
            out[rest] = _max_q0(U[rest], Y, self.profile.means)
        return out

    def _choose(self, U: np.ndarray, q0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        best = np.max(q0, axis=1)
        align = (U - self.x) @ self.grid.T
        cand = q0 >= best[:, None] - DECOMP_TOL
        score = np.where(cand, align, -np.inf)
        return np.argmax(score, axis=1), best

    def decompose(self, U) -> PromiseState:
        """Decompose ``U`` with the largest ball weight ``q0``.

        Ties between grid directions go to the direction best aligned with
        ``U - x``, then to the lowest index. States not covered by the grid
        fall back to an exact search over exposed directions.

        Raises
        ------
        StateOutsideRegion
            When no decomposition exists.
        """
        U = np.asarray(U, dtype=float)
        E = self.profile.means
        if np.any(U < -DECOMP_TOL):
            raise StateOutsideRegion("negative promised utility")
        U = np.clip(U, 0.0, None)
        if self.grid.shape[0] > 0:
            q0 = self._grid_q0(U[None])
            k, best = self._choose(U[None], q0)
            if np.isfinite(best[0]):
                key = int(k[0])
                return self._state(U, float(best[0]), key)
        q0_ni = float(np.sum(U / E))
        key, q0v = self._exact_search(U)
        if key is not None:
            return self._state(U, q0v, key)
        if q0_ni <= 1 + 1e-10:
            s, q, _ = _finish_decomposition(U, 0.0, None, E)
            return PromiseState(U=U, s=s, q=q, q0=0.0, key=None)
        raise StateOutsideRegion(f"state {U} admits no decomposition over the region generators")

    def _state(self, U: np.ndarray, q0: float, key: Hashable) -> PromiseState:
        E = self.profile.means
        d = self.direction_of(key)
        y = self.x + self.r * d
        if q0 <= DECOMP_TOL:
            s, q, _ = _finish_decomposition(U, 0.0, None, E)
            return PromiseState(U=U, s=s, q=q, q0=0.0, key=None)
        s, q, q0 = _finish_decomposition(U, q0, y, E)
        return PromiseState(U=U, s=s, q=q, q0=q0, key=key, direction=d, ytilde=y)

    def _exact_search(self, U: np.ndarray) -> tuple[Hashable | None, float]:
        """Search exposed directions off the grid for the largest ``q0``."""
        E = self.profile.means
        n = self.profile.n
        diff = U - self.x
        norm = float(np.linalg.norm(diff))
        cands = []
        if norm > 0:
            d0 = np.maximum(diff / norm, 0.0)
            if np.linalg.norm(d0) > 0:
                cands.append(d0 / np.linalg.norm(d0))
        if n == 2:
            if self.grid.shape[0] > 0:
                a0, a1 = (math.atan2(self.grid[0, 1], self.grid[0, 0]),
                          math.atan2(self.grid[-1, 1], self.grid[-1, 0]))
            else:
                a0, a1 = 0.0, math.pi / 2
            t = np.linspace(a0, a1, 4001)
            cands.extend(np.column_stack([np.cos(t), np.sin(t)]))
        else:
            D = direction_grid(n, 16 * max(1, self.grid.shape[0]))
            cands.extend(D[exposed_mask(D, self.x, self.r, E)])
        if not cands:
            return None, -np.inf
        D = np.array(cands)
        D = D[exposed_mask(D, self.x, self.r, E)]
        if D.shape[0] == 0:
            return None, -np.inf
        vals = _max_q0(U[None], self.x + self.r * D, E)[0]
        k = int(np.argmax(vals))
        if not np.isfinite(vals[k]):
            return None, -np.inf
        best_d, best_v = D[k], float(vals[k])
        if best_v < 1.0 - 1e-15:
            best_d, best_v = self._refine_direction(U, best_d, best_v)
        return self.exact_key(best_d), best_v

    def _refine_direction(self, U, d, value):
        from scipy.optimize import minimize

        E = self.profile.means

        def to_dir(th):
            v = np.ones(self.profile.n)
            for j, a in enumerate(th):
                v[j] *= math.cos(a)
                v[j + 1:] *= math.sin(a)
            return v

        th0 = []
        rem = d.copy()
        for j in range(self.profile.n - 1):
            th0.append(math.atan2(np.linalg.norm(rem[j + 1:]), rem[j]))
        def obj(th):
            th = np.clip(th, 0.0, math.pi / 2)
            dd = to_dir(th)
            if not exposed_mask(dd[None], self.x, self.r, E)[0]:
                return 2.0
            v = _max_q0(U[None], (self.x + self.r * dd)[None], E)[0, 0]
            return -v if np.isfinite(v) else 2.0
        res = minimize(obj, np.array(th0), method="Nelder-Mead",
                       options={"xatol": 1e-13, "fatol": 1e-15, "maxiter": 400})
        if -res.fun > value:
            return to_dir(np.clip(res.x, 0, math.pi / 2)), float(-res.fun)
        return d, value

    def boundary_state(self, direction) -> PromiseState:
        """The state ``x + r d`` for an exposed unit direction ``d``."""
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        matches = np.nonzero(np.all(np.abs(self.grid - d) <= 1e-15, axis=1))[0]
        key = int(matches[0]) if matches.size else self.exact_key(d)
        U = self.x + self.r * d
        n = self.profile.n
        return PromiseState(U=U, s=np.ones(n), q=np.zeros(n), q0=1.0, key=key, direction=d, ytilde=U)

    def default_state(self, alpha=None) -> PromiseState:
        """Boundary state on the grid direction best aligned with ``alpha``."""
        a = self.profile.alpha_array if alpha is None else np.asarray(alpha, dtype=float)
        if self.grid.shape[0] == 0:
            return self.decompose(self.x)
        k = int(np.argmax(self.grid @ a))
        return self.boundary_state(self.grid[k])

    # -- responses -----------------------------------------------------------

    def outcome_arrays(self, state: PromiseState) -> tuple[np.ndarray, np.ndarray]:
        """Allocation and next promise on every joint outcome (C order)."""
        E = self.profile.means
        N = self.profile.joint().size
        base_alloc = np.tile(state.s * state.q, (N, 1))
        base_next = np.tile(state.s * state.q * E, (N, 1))
        if state.q0 > 0 and state.key is not None:
            data = self.boundary(state.key)
            base_alloc = base_alloc + state.q0 * state.s * data.table.entries
            base_next = base_next + state.q0 * state.s * data.promises
        return base_alloc, base_next

    def respond_index(self, state: PromiseState, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        alloc, nxt = self.outcome_arrays(state)
        flat = _flat_index(self.profile, idx)
        return alloc[flat], nxt[flat]

    def respond_values(self, state: PromiseState, values) -> tuple[np.ndarray, np.ndarray]:
        """Responses to arbitrary reported values (snapped to atoms below)."""
        return self.respond_index(state, snap_reports(self.profile, values))

    def promise_slack(self, state: PromiseState, promises: np.ndarray) -> np.ndarray:
        """Slack of next promises in the region piece they are meant to occupy.

        For ``q0 > 0`` the promise must lie in the scaled ellipsoid
        ``s * (q E + q0 B(next_center, next_radius))``; the slack is the
        radius minus the distance of the preimage to the center. Pure vertex
        states promise their own state and have slack 0.
        """
        P = np.atleast_2d(promises)
        if state.q0 <= DECOMP_TOL or state.key is None:
            return np.zeros(P.shape[0])
        E = self.profile.means
        pos = state.s > 0
        pre = np.tile(self.next_center, (P.shape[0], 1))
        with np.errstate(divide="ignore", invalid="ignore"):
            pre[:, pos] = (P[:, pos] / state.s[pos] - state.q[pos] * E[pos]) / state.q0
        return self.next_radius - np.linalg.norm(pre - self.next_center, axis=1)

    # -- constants -----------------------------------------------------------

    def phi_norms(self, keys: Sequence[Hashable] | None = None) -> np.ndarray:
        """Largest squared deviation ``|Phi|^2`` per boundary direction.

        ``Phi = gamma / (1 - gamma) * (Z - mean Z)`` is the coupled,
        discount-free part of the promise spread; validity of promises needs
        ``((1 - gamma)/gamma) |Phi|^2 <= delta (2 r - s)``.
        """
        keys = range(self.grid.shape[0]) if keys is None else keys
        out = []
        for k in keys:
            data = self.boundary(k)
            phi = (self.gamma / (1 - self.gamma)) * (data.promises - data.means)
            out.append(float(np.max(np.sum(phi * phi, axis=1))))
        return np.array(out)

    def __repr__(self) -> str:
        return (f"BallMechanism(x={self.x.tolist()}, r={self.r:.6g}, delta={self.delta:.6g}, "
                f"gamma={self.gamma:.6g}, directions={self.grid.shape[0]})")


def measured_margin_constant(mech: BallMechanism) -> float:
    """Largest ``|Phi|^2`` over the grid directions (builds every grid table)."""
    norms = mech.phi_norms()
    return float(np.max(norms)) if norms.size else 0.0


def default_lower_bound(profile: UtilityProfile) -> float | None:
    low = min(d.atoms[0] for d in profile.dists)
    return low if low > 0 else None


def build_ball_mechanism(profile: UtilityProfile, x, r: float, delta: float, gamma: float, *,
                         C: float | str | None = None, variant: str = "new",
                         config: Config = DEFAULT_CONFIG, required_slack: float | None = None,
                         check_margin: bool = True, check_ball: bool = True,
                         grid: np.ndarray | None = None) -> BallMechanism:
    """Construct the discounted ball mechanism and check its preconditions.

    Parameters
    ----------
    C : float, "measured", or None
        Constant of the lower end of the safe-margin chain. ``None`` uses
        :func:`margin_constant` (with the smallest atom as lower bound when it
        is positive). ``"measured"`` builds every grid table and uses the
        largest observed ``|Phi|^2``, which certifies validity for those
        directions.

    Raises
    ------
    NotInUstar
        When ``B(x, r + delta)`` is not certified inside U*.
    MarginViolated
        When ``delta`` leaves the safe-margin interval.
    """
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    if r <= 0 or delta < 0:
        raise ValueError("need r > 0 and delta >= 0")
    x = np.asarray(x, dtype=float)
    if check_ball:
        verdict = ball_in_ustar(profile, BallQuery(tuple(x), r + delta), required_slack)
        if isinstance(verdict, Outside):
            raise NotInUstar(f"B(x, r+delta) not inside U* (slack {verdict.slack:.3g})",
                             verdict.witness, verdict.slack)
    lo_factor, hi = safe_margin_bounds(r, gamma, 1.0)
    if check_margin and delta > hi * (1 + 1e-12):
        raise MarginViolated(f"delta={delta} exceeds r*gamma/(1-gamma)={hi}")
    mech = BallMechanism(profile, x, r, delta, gamma, variant=variant, grid=grid, config=config,
                         realize_tol=config.realize_tol)
    if isinstance(C, str):
        if C != "measured":
            raise ValueError("C must be a number, 'measured' or None")
        Cval = measured_margin_constant(mech)
    elif C is None:
        Cval = margin_constant(profile, x, r, default_lower_bound(profile))
    else:
        Cval = float(C)
    mech.C = Cval
    if check_margin and delta < Cval * lo_factor * (1 - 1e-12):
        raise MarginViolated(f"delta={delta} below C(1-gamma)/(gamma r)={Cval * lo_factor}")
    return mech


# ---------------------------------------------------------------------------
# Execution and verifiers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepResult:
    allocation: np.ndarray
    next: PromiseState


def step(mech, state: PromiseState, reports) -> StepResult:
    """Play one round: allocate on ``reports`` and move to the next state.

    Raises
    ------
    StateOutsideRegion
        When the promised next state cannot be decomposed.
    """
    idx = snap_reports(mech.profile, reports)
    alloc, nxt = mech.respond_index(state, idx)
    return StepResult(allocation=alloc[0], next=mech.decompose(nxt[0]))


def promise_keeping_violation(profile: UtilityProfile, gamma: float, U, alloc: np.ndarray,
                              promises: np.ndarray) -> float:
    """``max_i |U_i - E[(1 - gamma) u_i p_i + gamma W_i]|`` over the joint support."""
    joint = profile.joint()
    value = joint.probs @ ((1 - gamma) * joint.values * alloc + gamma * promises)
    return float(np.max(np.abs(np.asarray(U, dtype=float) - value)))


def verify_promise_keeping(mech, state: PromiseState, tol: float = 1e-9) -> float:
    """Largest promise-keeping violation of ``state`` (exact enumeration)."""
    alloc, nxt = mech.outcome_arrays(state)
    return promise_keeping_violation(mech.profile, mech.gamma, state.U, alloc, nxt)


def verify_valid_promises(mech, state: PromiseState) -> float:
    """Smallest slack of next promises over every joint report."""
    _, nxt = mech.outcome_arrays(state)
    return float(np.min(mech.promise_slack(state, nxt)))


def ic_report_grid(profile: UtilityProfile, i: int) -> np.ndarray:
    """Deviation reports for agent ``i``: atoms, midpoints, 0 and vbar."""
    a = profile.dists[i].atom_array
    mids = (a[:-1] + a[1:]) / 2
    return np.unique(np.concatenate([a, mids, [0.0, profile.vbar]]))


def verify_ic(mech, state: PromiseState, tol: float = 1e-8) -> float:
    """Largest one-round gain from misreporting, over agents and reports.

    The gain of an agent with true utility ``u`` reporting ``v`` is
    ``(1 - gamma) u (P_i(v) - P_i(u)) + gamma (W_i(v) - W_i(u))`` where the
    interim quantities average over the other agents' truthful reports.
    Reports include off-atom midpoints, which exercises the step extension.
    """
    profile = mech.profile
    gamma = mech.gamma
    best = 0.0
    for i, d in enumerate(profile.dists):
        others = [j for j in range(profile.n) if j != i]
        sub_shape = tuple(profile.dists[j].size for j in others)
        sub_idx = np.indices(sub_shape).reshape(len(others), -1).T if others else np.zeros((1, 0), int)
        sub_prob = np.ones(sub_idx.shape[0])
        for col, j in enumerate(others):
            sub_prob *= profile.dists[j].prob_array[sub_idx[:, col]]
        reports = ic_report_grid(profile, i)
        P = np.empty(reports.shape[0])
        W = np.empty(reports.shape[0])
        for k, v in enumerate(reports):
            vals = np.empty((sub_idx.shape[0], profile.n))
            for col, j in enumerate(others):
                vals[:, j] = profile.dists[j].atom_array[sub_idx[:, col]]
            vals[:, i] = v
            alloc, nxt = mech.respond_index(state, snap_reports(profile, vals))
            P[k] = sub_prob @ alloc[:, i]
            W[k] = sub_prob @ nxt[:, i]
        for u in d.atoms:
            k_true = int(np.nonzero(reports == u)[0][0])
            truthful = (1 - gamma) * u * P[k_true] + gamma * W[k_true]
            gains = (1 - gamma) * u * P + gamma * W - truthful
            best = max(best, float(np.max(gains)))
    return best


# ---------------------------------------------------------------------------
# Finite-horizon schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FiniteHorizonSchedule:
    """Radii, margins and centers of the finite-horizon ball trajectory.

    Index ``t`` counts remaining rounds, with discount ``gamma(t) = 1 - 1/t``.
    Rounds ``t <= T0`` are served by the report-independent mechanism on the
    anchor ball; rounds ``t > T0`` by ball mechanisms with center ``x^(t)``,
    radius ``r_t``, margin ``delta_t`` and table anchor ``y^(t)``.
    """

    profile: UtilityProfile = field(repr=False)
    T: int
    x: np.ndarray
    r: float
    delta: float
    C: float
    c0: float
    C_tilde: float
    r0: float
    anchor: np.ndarray
    anchor_radius: float
    T0: int
    T1: int
    T2: int
    radii: np.ndarray = field(repr=False)
    margins: np.ndarray = field(repr=False)
    anchors: np.ndarray = field(repr=False)
    centers: np.ndarray = field(repr=False)
    drift: float
    ball_checks: int

    def gamma(self, t: int) -> float:
        return 1.0 - 1.0 / t

    def chain_slack(self, t: int) -> tuple[float, float]:
        """Slacks of ``r_t g/(1-g) >= delta_t >= C_tilde (1-g)/(g r_t)`` at round t."""
        g = self.gamma(t)
        rt, dt = self.radii[t], self.margins[t]
        return rt * g / (1 - g) - dt, dt - self.C_tilde * (1 - g) / (g * rt)


def default_r0(profile: UtilityProfile) -> float:
    return float(np.min(profile.means)) / (12 * profile.n)


def finite_horizon_schedule(profile: UtilityProfile, x, r: float, delta: float, T: int, *,
                            C: float | None = None, c0: float | None = None,
                            r0: float | None = None, check_balls: bool = True,
                            config: Config = DEFAULT_CONFIG,
                            required_slack: float | None = None) -> FiniteHorizonSchedule:
    """Build the two-phase finite-horizon schedule for target ball ``B(x, r)``.

    Phase one shrinks the radius as ``r_t = sqrt(C_tilde / (t - 1))`` with
    margin ``delta_t = r_t``; phase two keeps ``r_t = r`` and lowers the margin
    as ``max(C_tilde / ((t - 1) r), delta)``. Table anchors ``y^(t)`` slide
    from ``x`` toward the anchor ``x0 = 6 r0 1`` in proportion to the extra
    radius, and centers follow ``x^(t) = gamma(t) x^(t-1) + (1 - gamma(t)) y^(t)``.

    Raises
    ------
    ScheduleInfeasible
        With the first round at which the constraint chain or a per-round
        ball containment fails.
    """
    x = np.asarray(x, dtype=float)
    c0 = config.c0 if c0 is None else float(c0)
    r0 = (config.r0 if config.r0 is not None else default_r0(profile)) if r0 is None else float(r0)
    if C is None:
        C = margin_constant(profile, x, r, default_lower_bound(profile))
    C_tilde = c0 * C
    n = profile.n
    anchor = 6.0 * r0 * np.ones(n)
    anchor_radius = 4.0 * r0
    T = int(T)
    if T < 1:
        raise ValueError("T must be positive")
    if T >= 2:
        gT = 1.0 - 1.0 / T
        need = C_tilde * (1 - gT) / (gT * r) * (1 + math.log(r / delta)) if delta > 0 else math.inf
        if not (r0 >= r >= delta >= need):
            raise ScheduleInfeasible(
                f"need r0 >= r >= delta >= {need:.4g} (r0={r0:.4g}, r={r:.4g}, delta={delta:.4g})", T)
    T1 = int(math.ceil(C_tilde / (r * r))) + 1
    T1 = max(T1, 2)
    T0 = 1
    for t in range(2, T + 1):
        if 2 * math.sqrt(C_tilde / (t - 1)) >= 2 * r0:
            T0 = t
        else:
            break
    radii = np.full(T + 1, np.nan)
    margins = np.full(T + 1, np.nan)
    anchors = np.full((T + 1, n), np.nan)
    centers = np.empty((T + 1, n))
    centers[: T0 + 1] = anchor
    T2 = T
    span = anchor_radius - (r + delta)
    for t in range(T0 + 1, T + 1):
        if t < T1:
            rt = math.sqrt(C_tilde / (t - 1))
            dt = rt
        else:
            rt = r
            dt = max(C_tilde / ((t - 1) * r), delta)
            if dt == delta and T2 == T and t < T2:
                T2 = t
        radii[t], margins[t] = rt, dt
        w = (rt + dt - (r + delta)) / span
        anchors[t] = x + w * (anchor - x)
        g = 1.0 - 1.0 / t
        centers[t] = g * centers[t - 1] + (1 - g) * anchors[t]
    for t in range(T0 + 1, T + 1):
        g = 1.0 - 1.0 / t
        upper = radii[t] * g / (1 - g) - margins[t]
        lower = margins[t] - C_tilde * (1 - g) / (g * radii[t])
        if upper < -1e-12 * radii[t] or lower < -1e-12 * margins[t]:
            raise ScheduleInfeasible(f"safe-margin chain fails at round {t}", t)
    checks = 0
    if check_balls and T > T0:
        seen: dict[tuple, bool] = {}
        for t in range(T0 + 1, T + 1):
            key = tuple(np.round(np.append(anchors[t], radii[t] + margins[t]), 13))
            if key in seen:
                continue
            verdict = ball_in_ustar(profile, BallQuery(tuple(anchors[t]), radii[t] + margins[t]),
                                    required_slack)
            checks += 1
            seen[key] = True
            if isinstance(verdict, Outside):
                raise ScheduleInfeasible(f"ball at round {t} not inside U* (slack {verdict.slack:.3g})", t)
    drift = float(np.linalg.norm(centers[T] - x)) if T > T0 else float(np.linalg.norm(anchor - x))
    for arr in (radii, margins, anchors, centers):
        arr.flags.writeable = False
    return FiniteHorizonSchedule(profile=profile, T=T, x=x, r=float(r), delta=float(delta), C=float(C),
                                 c0=c0, C_tilde=C_tilde, r0=r0, anchor=anchor,
                                 anchor_radius=anchor_radius, T0=T0, T1=T1, T2=T2, radii=radii,
                                 margins=margins, anchors=anchors, centers=centers, drift=drift,
                                 ball_checks=checks)


def drift_coefficient(T: int, T0: int, r: float, delta: float, anchor_radius: float,
                      radii_margins: Sequence[float]) -> float:
    """Coefficient ``c_T`` with ``x^(T) - x = c_T (x0 - x)``."""
    total = float(T0)
    span = anchor_radius - (r + delta)
    for rho in radii_margins:
        total += (rho - (r + delta)) / span
    return total / T


class FiniteHorizonMechanism:
    """Round-dependent mechanisms of a finite-horizon schedule.

    ``round(t)`` returns the mechanism serving the round with ``t`` rounds
    remaining. Ball rounds share one table cache.
    """

    def __init__(self, schedule: FiniteHorizonSchedule, variant: str = "new",
                 config: Config = DEFAULT_CONFIG):
        self.schedule = schedule
        self.profile = schedule.profile
        self.variant = variant
        self.config = config
        self._rounds: dict[int, object] = {}
        self._tables: dict = {}
        self._by_params: dict[tuple, BallMechanism] = {}

    def round(self, t: int):
        mech = self._rounds.get(t)
        if mech is not None:
            return mech
        sch = self.schedule
        g = 1.0 - 1.0 / t
        if t <= sch.T0:
            mech = NoInformationMechanism(self.profile, g)
        else:
            params = (tuple(np.round(sch.centers[t], 15)), tuple(np.round(sch.centers[t - 1], 15)),
                      sch.radii[t], sch.margins[t], g, tuple(np.round(sch.anchors[t], 15)))
            mech = self._by_params.get(params)
            if mech is None:
                mech = BallMechanism(self.profile, sch.centers[t], sch.radii[t], sch.margins[t], g,
                                     sch.C_tilde, anchor=sch.anchors[t],
                                     next_center=sch.centers[t - 1], next_radius=sch.radii[t],
                                     variant=self.variant, table_cache=self._tables,
                                     realize_tol=self.config.realize_tol, config=self.config)
                self._by_params[params] = mech
        self._rounds[t] = mech
        return mech

    def initial_state(self, alpha=None) -> PromiseState:
        """Boundary state of the final-round ball best aligned with ``alpha``."""
        T = self.schedule.T
        mech = self.round(T)
        if isinstance(mech, BallMechanism):
            return mech.default_state(alpha)
        return mech.decompose(self.schedule.anchor)


def region_gap(profile: UtilityProfile, center, radius: float, alpha=None) -> float:
    """``sigma(alpha) - max(NI(alpha), alpha^T center + radius |alpha|)``."""
    a = profile.alpha_array if alpha is None else np.asarray(alpha, dtype=float)
    best = max(no_info_value(profile, a), float(a @ np.asarray(center)) + radius * float(np.linalg.norm(a)))
    return support_value(profile, a) - best
