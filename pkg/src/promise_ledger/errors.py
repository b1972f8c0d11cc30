"""Exception hierarchy for promise_ledger.

Every error raised deliberately by the library derives from
:class:`PromiseLedgerError`, so callers (and the CLI) can separate
contract failures from programming errors.
"""

from __future__ import annotations

import numpy as np


class PromiseLedgerError(Exception):
    """Base class for all library errors."""


class CapExceeded(PromiseLedgerError):
    """A joint-support enumeration would exceed the configured cap."""


class NotInRegion(PromiseLedgerError):
    """A utility vector lies outside the region an operation requires."""


class SolverStall(PromiseLedgerError):
    """An iterative solver hit its iteration cap before converging."""


class DegenerateCenter(PromiseLedgerError):
    """A ball center leaves no room below the per-agent maximum utility."""


class ZeroDirection(PromiseLedgerError):
    """A coupling direction lacks the nonzero entries it needs."""


class MarginViolated(PromiseLedgerError):
    """The safe-margin chain between radius, margin and discount fails."""


class NotInUstar(PromiseLedgerError):
    """A ball is not contained in the full-information region.

    Attributes
    ----------
    witness : numpy.ndarray
        Direction on which the support-function slack is negative.
    slack : float
        The observed (negative) slack on ``witness``.
    """

    def __init__(self, message: str, witness: np.ndarray, slack: float):
        super().__init__(message)
        self.witness = np.asarray(witness, dtype=float)
        self.slack = float(slack)


class StateOutsideRegion(PromiseLedgerError):
    """A promise state admits no decomposition over the region generators."""


class ScheduleInfeasible(PromiseLedgerError):
    """A finite-horizon schedule violates one of its constraints.

    Attributes
    ----------
    step : int
        First round at which a constraint fails.
    """

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = int(step)


class PartitionTooLarge(PromiseLedgerError):
    """Subset enumeration over a partition would exceed 16 agents."""


class DegenerateSeries(PromiseLedgerError):
    """A rate series is too short or contains nonpositive gaps."""


class GridTooLarge(PromiseLedgerError):
    """A deviation grid or evaluation tree would exceed its cap."""
