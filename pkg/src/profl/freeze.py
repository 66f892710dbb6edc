"""Effective-movement tracking and the block freezing decision.

Rounds are server aggregation rounds. The tracker only ever sees the
active block's aggregated parameters.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class WarmingUp(Exception):
    """Raised when fewer than ``window + 1`` snapshots are buffered."""


class Decision(str, enum.Enum):
    CONTINUE = "continue"
    FREEZE = "freeze"


def movement_ratio(deltas: np.ndarray) -> tuple[float, bool]:
    """Effective movement of an ``(H, n_scalars)`` array of per-round updates.

    Returns ``(em, stationary)``. Net displacement is summed from the same
    deltas as the path length, so a window of same-signed updates gives
    exactly 1.0.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    path = np.abs(deltas).sum(axis=0).sum()
    if path == 0.0:
        return 0.0, True
    net = np.abs(deltas.sum(axis=0)).sum()
    return float(net / path), False


@dataclass
class EffectiveMovementTracker:
    window: int = 10
    _snapshots: deque = field(default=None, repr=False)
    _size: int | None = field(default=None, repr=False)
    rounds: int = 0
    series: list[tuple[int, float]] = field(default_factory=list)
    stationary: list[bool] = field(default_factory=list)
    # ``series`` split into columns, so slope fits need not re-zip it each round
    ks: list[int] = field(default_factory=list, repr=False)
    ems: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        self._snapshots = deque(maxlen=self.window + 1)

    def reset(self) -> None:
        self._snapshots.clear()
        self._size = None
        self.rounds = 0
        self.series = []
        self.stationary = []
        self.ks = []
        self.ems = []

    def observe(self, params: np.ndarray) -> float | None:
        """Buffer one snapshot; returns the new EM value once warm."""
        params = np.array(params, dtype=np.float64).ravel()
        if self._size is None:
            self._size = params.size
        elif params.size != self._size:
            raise ValueError(f"parameter count changed from {self._size} to {params.size} mid-step")
        self._snapshots.append(params)
        k = self.rounds
        self.rounds += 1
        if len(self._snapshots) < self.window + 1:
            return None
        em, still = movement_ratio(np.diff(np.stack(self._snapshots), axis=0))
        self.series.append((k, em))
        self.ks.append(k)
        self.ems.append(em)
        self.stationary.append(still)
        return em

    def effective_movement(self) -> float:
        if not self.series:
            raise WarmingUp(f"{len(self._snapshots)} of {self.window + 1} snapshots buffered")
        return self.series[-1][1]


def fit_slope(rounds: Sequence[float], values: Sequence[float]) -> float:
    """Ordinary least-squares slope of ``values`` against ``rounds``."""
    x = np.asarray(rounds, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if x.size != y.size:
        raise ValueError("rounds and values differ in length")
    if x.size < 2:
        raise ValueError("need at least two points for a slope")
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise ValueError("slope undefined: all round indices identical")
    return float(dx @ (y - y.mean())) / sxx


@dataclass(frozen=True)
class FreezePolicy:
    phi: float = 0.15
    patience: int = 20  # consecutive hits W
    min_rounds: int | None = None  # None -> window + 5
    slope_window: int | None = None  # trailing EM points for the fit; None = whole step

    def __post_init__(self):
        if not 0.0 < self.phi < 1.0:
            raise ValueError("phi must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.slope_window is not None and self.slope_window < 2:
            raise ValueError("slope_window must be >= 2")


class SlopeGate:
    """Counts consecutive slopes below ``phi * |initial slope|``.

    A round whose window saw no movement at all counts as a hit regardless
    of the slope; when the initial slope is exactly zero that is the only
    way to score one.
    """

    def __init__(self, policy: FreezePolicy):
        self.policy = policy
        self.slope_init: float | None = None
        self.hits = 0

    def update(self, slope: float, stationary: bool = False) -> Decision:
        if self.slope_init is None:
            self.slope_init = slope
        threshold = self.policy.phi * abs(self.slope_init)
        hit = stationary or abs(slope) < threshold
        self.hits = self.hits + 1 if hit else 0
        return Decision.FREEZE if self.hits >= self.policy.patience else Decision.CONTINUE


class FreezeController:
    """Tracker plus gate for one training step."""

    def __init__(self, window: int = 10, policy: FreezePolicy | None = None):
        self.policy = policy or FreezePolicy()
        self.tracker = EffectiveMovementTracker(window)
        self.gate = SlopeGate(self.policy)
        self.last_slope: float | None = None

    @property
    def min_rounds(self) -> int:
        p = self.policy.min_rounds
        return self.tracker.window + 5 if p is None else p

    def reset(self) -> None:
        self.tracker.reset()
        self.gate = SlopeGate(self.policy)
        self.last_slope = None

    def start(self, params: np.ndarray) -> None:
        """Record the step's starting parameters (before any round)."""
        self.reset()
        self.tracker.observe(params)

    def observe_round(self, params: np.ndarray) -> Decision:
        self.tracker.observe(params)
        self.last_slope = None
        series = self.tracker.series
        # tracker.rounds counts the starting snapshot too
        if self.tracker.rounds - 1 < self.min_rounds or len(series) < 2:
            return Decision.CONTINUE
        start = 0 if self.policy.slope_window is None else -self.policy.slope_window
        self.last_slope = fit_slope(self.tracker.ks[start:], self.tracker.ems[start:])
        return self.gate.update(self.last_slope, self.tracker.stationary[-1])


def replay(
    em_series: Sequence[tuple[int, float]],
    stationary: Sequence[bool],
    policy: FreezePolicy,
    window: int,
) -> int | None:
    """Index into ``em_series`` at which a freeze fires, or None.

    ``em_series[i]`` must come from round ``window + i``, as logged by a
    controller. Reproduces :class:`FreezeController` decisions from logs.
    """
    gate = SlopeGate(policy)
    min_rounds = window + 5 if policy.min_rounds is None else policy.min_rounds
    for i in range(1, len(em_series)):
        k = em_series[i][0]
        if k < min_rounds:
            continue
        pts = em_series[: i + 1]
        if policy.slope_window is not None:
            pts = pts[-policy.slope_window :]
        ks, ems = zip(*pts)
        if gate.update(fit_slope(ks, ems), stationary[i]) is Decision.FREEZE:
            return i
    return None
