"""Per-threshold participation statistics with optimistic confidence bounds.

The server cannot observe the client resource distribution directly; it
observes, per round, whether the arriving client joined at the induced
threshold.  Each threshold grid point keeps a pull count and a join count,
and the estimate for its participation probability is the empirical mean
plus an exploration bonus sqrt(ln N / 2n), clamped into [0, 1].  N is the
total number of recorded rounds so far, which keeps the bound usable
without a known horizon.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import UnknownBucket
from .mechanism import CostModel, ResourceBounds, threshold

GRID_MATCH_TOL = 1e-9


@dataclass
class BucketStats:
    """Statistics for one threshold grid point."""

    theta: float
    pulls: int
    joins: int
    last_ucb: float


class EstimatorState:
    """Join statistics over a threshold grid, with optional sliding window.

    ``record`` is the single writer and must be externally serialized;
    the read-side (``ucb``, ``ucb_array``, ``estimated_survival``) is pure.
    When ``window`` is set, observations older than the window are discarded,
    which supports slowly drifting client populations; default off.
    """

    def __init__(self, theta_grid: np.ndarray, window: Optional[int] = None):
        self.thetas = np.asarray(theta_grid, dtype=float)
        if self.thetas.ndim != 1 or self.thetas.size == 0:
            raise ValueError("theta grid must be a non-empty 1-d array")
        self.pulls = np.zeros(self.thetas.size, dtype=np.int64)
        self.joins = np.zeros(self.thetas.size, dtype=np.int64)
        self.total_rounds = 0
        self.window = window
        self._events: deque[tuple[int, bool]] = deque()

    # -- index helpers ------------------------------------------------------

    def bucket_index(self, theta_hat: float) -> int:
        step = self.thetas[1] - self.thetas[0] if self.thetas.size > 1 else 1.0
        pos = (theta_hat - self.thetas[0]) / step
        idx = int(round(pos))
        if 0 <= idx < self.thetas.size and abs(
            theta_hat - self.thetas[idx]
        ) <= GRID_MATCH_TOL:
            return idx
        raise UnknownBucket(f"{theta_hat} is not on the threshold grid")

    # -- writes -------------------------------------------------------------

    def record(self, theta_hat: float, joined: bool) -> None:
        self.record_index(self.bucket_index(theta_hat), joined)

    def record_index(self, idx: int, joined: bool) -> None:
        if not 0 <= idx < self.thetas.size:
            raise UnknownBucket(f"bucket index {idx} out of range")
        self.pulls[idx] += 1
        if joined:
            self.joins[idx] += 1
        self.total_rounds += 1
        if self.window is not None:
            self._events.append((idx, joined))
            while len(self._events) > self.window:
                old_idx, old_joined = self._events.popleft()
                self.pulls[old_idx] -= 1
                if old_joined:
                    self.joins[old_idx] -= 1
                self.total_rounds -= 1

    def reset(self, window: Optional[int] = None) -> None:
        """Discard all accumulated statistics and install a new sliding
        window (None disables it).  Meant for abrupt population shifts;
        gradual drift is better served by a standing window."""
        self.pulls[:] = 0
        self.joins[:] = 0
        self.total_rounds = 0
        self.window = window
        self._events.clear()

    # -- reads --------------------------------------------------------------

    def _bonus(self, pulls: int) -> float:
        log_n = math.log(self.total_rounds) if self.total_rounds >= 2 else 0.0
        return math.sqrt(log_n / (2.0 * pulls))

    def ucb_index(self, idx: int) -> float:
        if not 0 <= idx < self.thetas.size:
            raise UnknownBucket(f"bucket index {idx} out of range")
        n = int(self.pulls[idx])
        if n == 0:
            return 1.0
        raw = self.joins[idx] / n + self._bonus(n)
        return min(1.0, raw)

    def ucb(self, theta_hat: float) -> float:
        return self.ucb_index(self.bucket_index(theta_hat))

    def ucb_array(self) -> np.ndarray:
        """Clamped bounds for every bucket; unpulled buckets are 1."""
        out = np.ones(self.thetas.size)
        pulled = self.pulls > 0
        if pulled.any():
            log_n = math.log(self.total_rounds) if self.total_rounds >= 2 else 0.0
            n = self.pulls[pulled].astype(float)
            out[pulled] = np.minimum(
                1.0, self.joins[pulled] / n + np.sqrt(log_n / (2.0 * n))
            )
        return out

    def bucket(self, theta_hat: float) -> BucketStats:
        idx = self.bucket_index(theta_hat)
        return BucketStats(
            theta=float(self.thetas[idx]),
            pulls=int(self.pulls[idx]),
            joins=int(self.joins[idx]),
            last_ucb=self.ucb_index(idx),
        )

    def estimated_survival(
        self, cost: CostModel, bounds: ResourceBounds
    ) -> Callable[[float, float], float]:
        """Estimate of the participation probability s(gamma, mu): the bound
        at the grid bucket at or above the induced threshold (ceiling), and
        0 where nobody can participate."""

        def fn(gamma: float, mu: float) -> float:
            t = threshold(gamma, mu, cost, bounds)
            if t is None:
                return 0.0
            step = self.thetas[1] - self.thetas[0] if self.thetas.size > 1 else 1.0
            pos = (t - self.thetas[0]) / step
            idx = int(math.ceil(pos - GRID_MATCH_TOL / step))
            idx = min(max(idx, 0), self.thetas.size - 1)
            return self.ucb_index(idx)

        return fn

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "buckets": [
                {"theta": float(t), "pulls": int(p), "joins": int(j)}
                for t, p, j in zip(self.thetas, self.pulls, self.joins)
            ],
            "total_rounds": int(self.total_rounds),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict, window: Optional[int] = None) -> "EstimatorState":
        thetas = np.array([b["theta"] for b in data["buckets"]], dtype=float)
        state = cls(thetas, window=window)
        state.pulls = np.array([b["pulls"] for b in data["buckets"]], dtype=np.int64)
        state.joins = np.array([b["joins"] for b in data["buckets"]], dtype=np.int64)
        state.total_rounds = int(data["total_rounds"])
        return state

    @classmethod
    def from_json(cls, text: str, window: Optional[int] = None) -> "EstimatorState":
        return cls.from_dict(json.loads(text), window=window)
