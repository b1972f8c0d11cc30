"""Rate-characterizing functions, max-flow certificates and slope fitting.

The functions here are exact expectations over the joint support. They
measure how much room a planner has to reward and penalize agents near ties
of the weighted utilities ``alpha_i u_i``, which governs how fast the
achievable region approaches U*. All absolute constants are configuration
knobs; outputs are structural up to those constants.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .config import DEFAULT_CONFIG, Config
from .dist import UtilityProfile
from .errors import DegenerateSeries, PartitionTooLarge
from .geometry import agent_sets

TOL = 1e-12
MAX_PARTITION_AGENTS = 16

Partition = tuple[tuple[int, ...], ...]


def _weighted(profile: UtilityProfile) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    joint = profile.joint()
    wu = joint.values * profile.alpha_array
    return joint.values, wu, joint.probs


def _as_etas(eta) -> tuple[np.ndarray, bool]:
    arr = np.atleast_1d(np.asarray(eta, dtype=float))
    if np.any(arr < 0):
        raise ValueError("eta must be nonnegative")
    return arr, np.ndim(eta) == 0


def f_pair(profile: UtilityProfile, i: int, j: int, eta):
    """``E[u_i 1{alpha_j u_j = Z} 1{alpha_j u_j in [alpha_i u_i, (1 + eta) alpha_i u_i]}]``.

    ``Z = max_k alpha_k u_k``. Equalities are tested with absolute tolerance
    1e-12. Accepts a scalar or an array of ``eta`` values.
    """
    if i == j:
        raise ValueError("f_pair needs two distinct agents")
    etas, scalar = _as_etas(eta)
    u, wu, probs = _weighted(profile)
    Z = wu.max(axis=1)
    top = np.abs(wu[:, j] - Z) <= TOL
    lo = wu[:, j] >= wu[:, i] - TOL
    base = probs * u[:, i] * top * lo
    hi = wu[:, j][None, :] <= (1 + etas)[:, None] * wu[:, i][None, :] + TOL
    out = hi @ base
    return float(out[0]) if scalar else out


def g_i(profile: UtilityProfile, i: int, eta):
    """``E[u_i 1{alpha_i u_i / (1 + eta) <= Z_i <= (1 + eta) alpha_i u_i}]``.

    ``Z_i = max_{j != i} alpha_j u_j``. Scalar or array ``eta``.
    """
    etas, scalar = _as_etas(eta)
    u, wu, probs = _weighted(profile)
    if profile.n == 1:
        out = np.zeros(etas.shape[0])
        return float(out[0]) if scalar else out
    others = np.delete(wu, i, axis=1).max(axis=1)
    a = wu[:, i][None, :]
    f = (1 + etas)[:, None]
    scale = TOL * np.maximum(1.0, np.abs(a))
    ind = (a / f <= others[None, :] + scale) & (others[None, :] <= f * a + scale)
    out = ind @ (probs * u[:, i])
    return float(out[0]) if scalar else out


def band_value(profile: UtilityProfile, i: int, eta):
    """``E[u_i 1{alpha_i u_i <= Z_i <= (1 + eta) alpha_i u_i}]``, a lower bound of ``g_i``."""
    etas, scalar = _as_etas(eta)
    u, wu, probs = _weighted(profile)
    if profile.n == 1:
        out = np.zeros(etas.shape[0])
        return float(out[0]) if scalar else out
    others = np.delete(wu, i, axis=1).max(axis=1)
    a = wu[:, i][None, :]
    f = (1 + etas)[:, None]
    scale = TOL * np.maximum(1.0, np.abs(a))
    ind = (a <= others[None, :] + scale) & (others[None, :] <= f * a + scale)
    out = ind @ (probs * u[:, i])
    return float(out[0]) if scalar else out


def _check_partition(profile: UtilityProfile, partition: Sequence[Sequence[int]]) -> Partition:
    parts = tuple(tuple(int(k) for k in block) for block in partition)
    total = sum(len(b) for b in parts)
    if total > MAX_PARTITION_AGENTS:
        raise PartitionTooLarge(f"partition covers {total} agents, limit is {MAX_PARTITION_AGENTS}")
    flat = [k for b in parts for k in b]
    if len(set(flat)) != len(flat) or any(k < 0 or k >= profile.n for k in flat):
        raise ValueError("partition blocks must be disjoint agent indices")
    if any(len(b) < 2 for b in parts):
        raise ValueError("every partition block needs at least two agents")
    return parts


def _proper_subsets(block: Sequence[int]) -> Iterable[tuple[int, ...]]:
    for size in range(1, len(block)):
        yield from itertools.combinations(block, size)


def f_partition(profile: UtilityProfile, partition: Sequence[Sequence[int]], eta):
    """``min_s min_B E[Z_B 1{Z_B <= Z_{I_s minus B} = Z <= (1 + eta) Z_B}]``.

    ``Z_B = max_{k in B} alpha_k u_k``; the inner minimum runs over nonempty
    proper subsets ``B`` of each block ``I_s``.

    Raises
    ------
    PartitionTooLarge
        When the blocks cover more than 16 agents.
    """
    parts = _check_partition(profile, partition)
    etas, scalar = _as_etas(eta)
    _, wu, probs = _weighted(profile)
    Z = wu.max(axis=1)
    best = np.full(etas.shape[0], np.inf)
    for block in parts:
        for B in _proper_subsets(block):
            rest = [k for k in block if k not in B]
            ZB = wu[:, list(B)].max(axis=1)
            ZR = wu[:, rest].max(axis=1)
            base = probs * ZB * (ZB <= ZR + TOL) * (np.abs(ZR - Z) <= TOL)
            ind = Z[None, :] <= (1 + etas)[:, None] * ZB[None, :] + TOL
            best = np.minimum(best, ind @ base)
    return float(best[0]) if scalar else best


def max_flow(nodes: Sequence[int], edges: Iterable[tuple[int, int, float]], source: int, sink: int) -> float:
    """Maximum flow by shortest augmenting paths (breadth-first search).

    Parameters
    ----------
    nodes : sequence of hashable labels.
    edges : iterable of ``(u, v, capacity)`` with nonnegative capacities;
        parallel edges add up.
    source, sink : node labels.

    Residual capacities below 1e-12 are treated as saturated.
    """
    labels = list(nodes)
    pos = {v: k for k, v in enumerate(labels)}
    m = len(labels)
    cap = np.zeros((m, m))
    for u, v, c in edges:
        if c < 0:
            raise ValueError("capacities must be nonnegative")
        if u != v:
            cap[pos[u], pos[v]] += float(c)
    s, t = pos[source], pos[sink]
    if s == t:
        raise ValueError("source and sink must differ")
    total = 0.0
    while True:
        parent = [-1] * m
        parent[s] = s
        queue = deque([s])
        while queue and parent[t] < 0:
            a = queue.popleft()
            for b in range(m):
                if parent[b] < 0 and cap[a, b] > TOL:
                    parent[b] = a
                    queue.append(b)
        if parent[t] < 0:
            return total
        bottleneck = math.inf
        b = t
        while b != s:
            a = parent[b]
            bottleneck = min(bottleneck, cap[a, b])
            b = a
        b = t
        while b != s:
            a = parent[b]
            cap[a, b] -= bottleneck
            cap[b, a] += bottleneck
            b = a
        total += bottleneck


def pair_table(profile: UtilityProfile, agents: Sequence[int], eta: float) -> dict[tuple[int, int], float]:
    """``f_pair(eta; k, l)`` for all ordered pairs of ``agents``."""
    return {(k, l): f_pair(profile, k, l, eta) for k in agents for l in agents if k != l}


def f_tilde(profile: UtilityProfile, partition: Sequence[Sequence[int]], eta: float) -> float:
    """``min_s min_{i != j in I_s}`` max flow from i to j with capacities ``f_pair``."""
    parts = _check_partition(profile, partition)
    best = math.inf
    for block in parts:
        weights = pair_table(profile, block, eta)
        edges = [(k, l, w) for (k, l), w in weights.items()]
        for i in block:
            for j in block:
                if i != j:
                    best = min(best, max_flow(block, edges, i, j))
    return float(best)


def strongly_connected_components(nodes: Sequence[int], edges: Iterable[tuple[int, int]]) -> list[tuple[int, ...]]:
    """Strongly connected components by forward and backward reachability.

    Components are returned sorted by their smallest node, each sorted.
    """
    nodes = list(nodes)
    succ: dict[int, set[int]] = {v: set() for v in nodes}
    pred: dict[int, set[int]] = {v: set() for v in nodes}
    for a, b in edges:
        succ[a].add(b)
        pred[b].add(a)

    def reach(start: int, adj: dict[int, set[int]]) -> set[int]:
        seen = {start}
        stack = [start]
        while stack:
            a = stack.pop()
            for b in adj[a]:
                if b not in seen:
                    seen.add(b)
                    stack.append(b)
        return seen

    remaining = set(nodes)
    comps = []
    for v in sorted(nodes):
        if v not in remaining:
            continue
        comp = reach(v, succ) & reach(v, pred)
        remaining -= comp
        comps.append(tuple(sorted(comp)))
    return sorted(comps)


def partition_from_graph(nodes: Sequence[int], edges: Iterable[tuple[int, int]]) -> Partition | None:
    """Split the graph into strongly connected components.

    Returns the components when each has at least two nodes, else ``None``.
    """
    comps = strongly_connected_components(nodes, edges)
    if any(len(c) < 2 for c in comps):
        return None
    return tuple(comps)


def linear_growth_edges(profile: UtilityProfile, agents: Sequence[int], eta_probe: float,
                        slope: float) -> list[tuple[int, int]]:
    """Edges ``i -> j`` with ``f_pair(eta; i, j) >= slope * eta`` on a small grid."""
    grid = eta_probe * 2.0 ** -np.arange(4)
    edges = []
    for i in agents:
        for j in agents:
            if i != j and np.all(f_pair(profile, i, j, grid) >= slope * grid):
                edges.append((i, j))
    return edges


def sc3_partition(profile: UtilityProfile, eta_probe: float = 1e-3,
                  config: Config = DEFAULT_CONFIG) -> Partition | None:
    """Partition of the tie-relevant agents into strongly connected groups.

    Builds the graph on ``I~`` with an edge ``i -> j`` when ``f_pair`` grows
    at least linearly near 0, and returns its strongly connected components
    when every component has two or more agents.
    """
    if eta_probe <= 0:
        raise ValueError("eta_probe must be positive")
    agents = agent_sets(profile).I_tilde
    if len(agents) < 2:
        return None
    edges = linear_growth_edges(profile, agents, eta_probe, config.slope_threshold)
    return partition_from_graph(agents, edges)


def eta_grid(points: int = DEFAULT_CONFIG.eta_points, low: float = 1e-4) -> np.ndarray:
    """Geometric grid from ``low`` to 1."""
    return np.geomspace(low, 1.0, points)


def predicted_eta(profile: UtilityProfile, partition: Sequence[Sequence[int]], gamma: float,
                  constants: Config = DEFAULT_CONFIG, grid: np.ndarray | None = None) -> float:
    """``inf {1} u {eta in (0, 1] : f(eta') >= C_eta sqrt(1 - gamma) eta' / eta for eta' >= eta}``.

    The universal quantifier is checked on grid points only, which makes the
    result an outer approximation of the infimum.
    """
    etas = eta_grid(constants.eta_points) if grid is None else np.asarray(grid, dtype=float)
    f = f_partition(profile, partition, etas)
    level = constants.C_eta * math.sqrt(1.0 - gamma)
    best = 1.0
    for k in range(etas.shape[0] - 1, -1, -1):
        if np.all(f[k:] >= level * etas[k:] / etas[k]):
            best = float(etas[k])
        else:
            break
    return best


def lower_eta(profile: UtilityProfile, i: int, gamma: float, constants: Config = DEFAULT_CONFIG,
              grid: np.ndarray | None = None) -> float:
    """``sup {eta in grid : g_i(eta) <= c_eta sqrt(1 - gamma)}`` (0 when empty)."""
    etas = eta_grid(constants.eta_points) if grid is None else np.asarray(grid, dtype=float)
    g = g_i(profile, i, etas)
    ok = etas[g <= constants.c_eta * math.sqrt(1.0 - gamma)]
    return float(ok.max()) if ok.size else 0.0


@dataclass(frozen=True)
class RateFunctions:
    """Rate functions of one partition on a grid of ``eta`` values."""

    etas: np.ndarray
    partition: Partition
    pairs: dict[tuple[int, int], np.ndarray] = field(repr=False)
    g: dict[int, np.ndarray] = field(repr=False)
    f: np.ndarray = field(repr=False)
    f_tilde: np.ndarray = field(repr=False)


def rate_functions(profile: UtilityProfile, partition: Sequence[Sequence[int]],
                   etas: Sequence[float]) -> RateFunctions:
    parts = _check_partition(profile, partition)
    etas = np.asarray(etas, dtype=float)
    agents = [k for b in parts for k in b]
    pairs = {(k, l): f_pair(profile, k, l, etas) for b in parts for k in b for l in b if k != l}
    g = {k: g_i(profile, k, etas) for k in agents}
    f = f_partition(profile, parts, etas)
    ft = np.array([f_tilde(profile, parts, float(e)) for e in etas])
    return RateFunctions(etas=etas, partition=parts, pairs=pairs, g=g, f=f, f_tilde=ft)


def gluing_profile(r: float, delta: float, c_f: float, r0: float, gamma: float) -> float:
    """``delta * cosh(c_f r / sqrt(1 - gamma)) / cosh(c_f r0 / sqrt(1 - gamma))``.

    Evaluated in a form that stays finite for large arguments.
    """
    if not 0 <= r <= r0:
        raise ValueError("need 0 <= r <= r0")
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    if r == r0:
        return float(delta)
    s = math.sqrt(1.0 - gamma)
    a, b = c_f * r / s, c_f * r0 / s
    ratio = math.exp(a - b) * (1.0 + math.exp(-2 * a)) / (1.0 + math.exp(-2 * b))
    return float(delta * ratio)


@dataclass(frozen=True)
class RateReport:
    """Least-squares fit of ``log gap = slope * log parameter + intercept``."""

    params: np.ndarray
    gaps: np.ndarray
    slope: float
    intercept: float
    residual: float
    eta_star: np.ndarray | None = None


def fit_rate(series: Sequence[tuple[float, float]]) -> RateReport:
    """Fit a log-log slope to ``(parameter, gap)`` pairs.

    The residual is the root-mean-square of the log-space residuals.

    Raises
    ------
    DegenerateSeries
        With fewer than 5 points or any nonpositive value.
    """
    data = np.asarray(list(series), dtype=float)
    if data.ndim != 2 or data.shape[0] < 5 or data.shape[1] != 2:
        raise DegenerateSeries("slope fits need at least 5 (parameter, gap) pairs")
    params, gaps = data[:, 0], data[:, 1]
    if np.any(gaps <= 0) or np.any(params <= 0) or not np.all(np.isfinite(data)):
        raise DegenerateSeries("parameters and gaps must be positive and finite")
    X, Y = np.log(params), np.log(gaps)
    A = np.column_stack([X, np.ones_like(X)])
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    resid = Y - A @ coef
    return RateReport(params=params, gaps=gaps, slope=float(coef[0]), intercept=float(coef[1]),
                      residual=float(np.sqrt(np.mean(resid * resid))))


def running_slopes(params: Sequence[float], gaps: Sequence[float]) -> np.ndarray:
    """Slope between consecutive points in log-log space (NaN for the first)."""
    p, g = np.log(np.asarray(params, dtype=float)), np.log(np.asarray(gaps, dtype=float))
    out = np.full(p.shape[0], np.nan)
    out[1:] = np.diff(g) / np.diff(p)
    return out
