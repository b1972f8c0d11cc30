"""Tunable constants.

The mechanism constructions involve absolute constants whose existence is
proved but whose values are not pinned down. They are collected here so the
CLI can override them with ``--const KEY=VAL``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass


@dataclass(frozen=True)
class Config:
    """Library-wide numerical knobs.

    Attributes
    ----------
    c0 : float
        Multiplier in ``C_tilde = c0 * C`` for finite-horizon schedules.
    r0 : float or None
        Finite-horizon anchor scale; ``None`` means ``min E[u_i] / (12 n)``.
    C_eta : float
        Constant in the predicted-eta threshold.
    c_eta : float
        Constant in the lower-bound eta threshold.
    joint_cap : int
        Largest joint support that may be enumerated.
    required_slack : float
        Ball-membership safety margin, as a multiple of ``vbar``.
    direction_budget : int
        Search directions used by :func:`ball_in_ustar`.
    refinement_steps : int
        Coordinate-descent sweeps after the grid search.
    grid_n2, grid_n3, grid_high : int
        Cached boundary directions for n = 2, n = 3 and n >= 4.
    realize_tol : float
        Tolerance used when realizing mechanism tables.
    truncation_eps : float
        Discounted runs stop at the first t with gamma**t <= truncation_eps.
    eta_points : int
        Size of the geometric eta grid on [1e-4, 1].
    slope_threshold : float
        Minimal slope f_pair(eta)/eta for an edge in the SC3 graph.
    """

    c0: float = 8.0
    r0: float | None = None
    C_eta: float = 1.0
    c_eta: float = 1.0
    joint_cap: int = 1_000_000
    required_slack: float = 1e-6
    direction_budget: int = 1024
    refinement_steps: int = 60
    grid_n2: int = 64
    grid_n3: int = 256
    grid_high: int = 512
    realize_tol: float = 1e-12
    truncation_eps: float = 1e-6
    eta_points: int = 256
    slope_threshold: float = 1e-3

    def with_overrides(self, overrides: dict[str, str]) -> "Config":
        """Return a copy with string-valued overrides parsed per field type."""
        fields = {f.name: f for f in dataclasses.fields(self)}
        parsed: dict[str, object] = {}
        for key, raw in overrides.items():
            if key not in fields:
                raise KeyError(f"unknown constant {key!r}; known: {sorted(fields)}")
            current = getattr(self, key)
            if raw.lower() in ("none", "auto"):
                parsed[key] = None
            elif isinstance(current, int) and not isinstance(current, bool):
                parsed[key] = int(raw)
            else:
                parsed[key] = float(raw)
        return dataclasses.replace(self, **parsed)

    def grid_size(self, n: int) -> int:
        """Number of cached boundary directions for ``n`` agents."""
        if n <= 2:
            return self.grid_n2
        if n == 3:
            return self.grid_n3
        return self.grid_high


DEFAULT_CONFIG = Config()


def worker_count() -> int:
    """Worker cap from ``PROMISE_LEDGER_THREADS`` (default 1)."""
    raw = os.environ.get("PROMISE_LEDGER_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
