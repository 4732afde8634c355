"""Adaptive reward selection with threshold-pinning signal schemes.

The engine runs in two phases.  An initialization sweep walks the threshold
grid once: for each target threshold it offers the smallest grid reward that
covers the client's cost at the truthfully disclosed communication state, so
every statistics bucket starts with one observation.  The adaptive phase then
scores every grid reward each round: the reward's posterior-mean pair is
chosen so the induced thresholds land exactly on two adjacent grid points,
the pair is weighted to preserve the prior mean, and the expected cost is
priced with the estimator's optimistic bounds.  The cheapest feasible reward
wins, ties toward the smaller reward.

Because the bracket construction depends only on the cost geometry, the
per-reward pairs are precomputed once; per-round selection is a vector
operation over the bucket bounds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, GridExhausted, Infeasible, InvalidDomain
from .estimator import EstimatorState
from .mechanism import (
    GRID_SNAP,
    CommPrior,
    CostModel,
    MechanismChoice,
    ResourceBounds,
    SignalScheme,
    SurvivalModel,
    build_scheme,
    full_pooling_scheme,
    full_revelation_scheme,
    solve_mu_for_threshold,
    threshold,
    two_point_split,
)

INIT_PHASE = "init"
ADAPTIVE_PHASE = "adaptive"


@dataclass(frozen=True)
class EngineConfig:
    """Everything the engine needs to run: domain box, prior, cost geometry,
    the common grid step (via bounds), the quality floor beta, and the
    convergence window."""

    bounds: ResourceBounds
    prior: CommPrior
    cost: CostModel
    beta: float = None  # type: ignore[assignment]
    convergence_window: int = 200
    seed: int = 0
    signaling: bool = True
    estimator_window: Optional[int] = None

    def __post_init__(self) -> None:
        if self.beta is None:
            object.__setattr__(self, "beta", self.bounds.theta_lo)
        if self.convergence_window < 1:
            raise ConfigError("convergence window must be >= 1")
        _validate_grid(self.reward_grid(), self.bounds.xi)
        _validate_grid(self.theta_grid(), self.bounds.xi)

    def reward_grid(self) -> np.ndarray:
        return self.bounds.reward_grid()

    def theta_grid(self) -> np.ndarray:
        return self.bounds.theta_grid()


def _validate_grid(grid: np.ndarray, xi: float) -> None:
    if grid.size < 2:
        raise ConfigError("grids need at least two points")
    steps = np.diff(grid)
    if np.max(np.abs(steps - xi)) > 1e-12:
        raise ConfigError("grid step does not match xi")


def bracket_mus(
    gamma: float,
    cost: CostModel,
    bounds: ResourceBounds,
    prior: CommPrior,
) -> tuple[float, float, int]:
    """Posterior means (mu_l, mu_r) whose induced thresholds sit exactly on
    the grid points bracketing the threshold at the prior mean, plus the
    index z of the upper grid point (threshold grid index, so the bracket is
    [grid[z-1], grid[z]]).

    When the threshold at the prior mean already lies on the grid the
    bracket degenerates to (mean, mean).  Raises Unbracketable when the
    threshold is undefined at the prior mean or a required posterior mean
    falls outside [tau_lo, tau_hi].
    """
    from .errors import Unbracketable

    thr_mean = threshold(gamma, prior.mean, cost, bounds)
    if thr_mean is None:
        raise Unbracketable(f"nobody participates at the prior mean for gamma={gamma}")
    grid = bounds.theta_grid()
    pos = (thr_mean - bounds.theta_lo) / bounds.xi
    nearest = int(round(pos))
    if 0 <= nearest < grid.size and abs(thr_mean - grid[nearest]) <= GRID_SNAP:
        return prior.mean, prior.mean, nearest
    z = int(math.ceil(pos))
    if z <= 0 or z >= grid.size:
        raise Unbracketable(f"threshold {thr_mean} has no grid bracket")
    mu_l = solve_mu_for_threshold(gamma, float(grid[z]), cost, bounds)
    mu_r = solve_mu_for_threshold(gamma, float(grid[z - 1]), cost, bounds)
    if mu_l is None or mu_r is None:
        raise Unbracketable(f"no posterior mean pins the bracket for gamma={gamma}")
    if mu_l > prior.mean + 1e-9 or mu_r < prior.mean - 1e-9:
        raise Unbracketable("bracket does not straddle the prior mean")
    return float(min(mu_l, prior.mean)), float(max(mu_r, prior.mean)), z


@dataclass(frozen=True)
class _TableEntry:
    """Precomputed per-reward selection data."""

    gamma: float
    feasible: bool
    scheme: Optional[SignalScheme]
    thresholds: tuple[Optional[float], ...]
    bucket_indices: tuple[int, ...]
    weights: tuple[float, ...]


@dataclass
class HistoryEntry:
    round: int
    gamma: Optional[float]
    mu_l: Optional[float]
    mu_r: Optional[float]
    w_l: Optional[float]
    predicted_cost: Optional[float]
    converged: bool


class DaringFedEngine:
    """Sequential state machine: ``offer`` (init_offer or select_round) and
    ``observe`` strictly alternate.  Selection is pure given the estimator
    state, so identical inputs replay to identical histories."""

    def __init__(self, config: EngineConfig):
        self.config = config
        self.theta_grid = config.theta_grid()
        self.reward_grid = config.reward_grid()
        self.estimator = EstimatorState(
            self.theta_grid, window=config.estimator_window
        )
        self.phase = INIT_PHASE
        self.init_cursor = 0
        self.round = 0
        self.choice_history: list[HistoryEntry] = []
        self.converged_gamma: Optional[float] = None
        self._pending_bucket: Optional[int] = None
        self._table: Optional[list[_TableEntry]] = None
        self._gammas_f: Optional[np.ndarray] = None  # per-entry selection arrays

    # -- bracket table -------------------------------------------------------

    def _build_table(self) -> None:
        from .errors import Unbracketable

        cfg = self.config
        entries: list[_TableEntry] = []
        for gamma in self.reward_grid:
            gamma = float(gamma)
            entry = _TableEntry(gamma, False, None, (), (), ())
            try:
                if cfg.signaling:
                    mu_l, mu_r, z = bracket_mus(gamma, cfg.cost, cfg.bounds, cfg.prior)
                    if mu_r - mu_l < 1e-15:
                        scheme = full_pooling_scheme(cfg.prior)
                        thresholds = (float(self.theta_grid[z]),)
                        buckets = (z,)
                        weights = (1.0,)
                    else:
                        w_l, w_r = two_point_split(cfg.prior.mean, mu_l, mu_r)
                        scheme = build_scheme([(mu_l, w_l), (mu_r, w_r)], cfg.prior)
                        thresholds = (
                            float(self.theta_grid[z]),
                            float(self.theta_grid[z - 1]),
                        )
                        buckets = (z, z - 1)
                        weights = (w_l, w_r)
                else:
                    thr = threshold(gamma, cfg.prior.mean, cfg.cost, cfg.bounds)
                    if thr is None:
                        raise Unbracketable("nobody participates at the prior mean")
                    pos = (thr - cfg.bounds.theta_lo) / cfg.bounds.xi
                    z = min(
                        max(int(math.ceil(pos - GRID_SNAP / cfg.bounds.xi)), 0),
                        self.theta_grid.size - 1,
                    )
                    scheme = full_pooling_scheme(cfg.prior)
                    thresholds = (thr,)
                    buckets = (z,)
                    weights = (1.0,)
                if min(thresholds) >= cfg.beta - 1e-12:
                    entry = _TableEntry(
                        gamma, True, scheme, thresholds, buckets, weights
                    )
            except Unbracketable:
                pass
            entries.append(entry)
        self._table = entries
        feas = [e for e in entries if e.feasible]
        self._feasible_entries = feas
        self._gammas_f = np.array([e.gamma for e in feas])
        self._w0 = np.array([e.weights[0] for e in feas])
        self._b0 = np.array([e.bucket_indices[0] for e in feas], dtype=np.int64)
        self._w1 = np.array(
            [e.weights[1] if len(e.weights) > 1 else 0.0 for e in feas]
        )
        self._b1 = np.array(
            [e.bucket_indices[1] if len(e.bucket_indices) > 1 else 0 for e in feas],
            dtype=np.int64,
        )

    def bracket_table(self) -> list[_TableEntry]:
        if self._table is None:
            self._build_table()
        return self._table

    # -- initialization sweep --------------------------------------------------

    def init_offer(self, realized_tau: float) -> MechanismChoice:
        """Offer targeting the init cursor's threshold at the disclosed true
        communication state: the smallest grid reward covering the target's
        cost.  Raises GridExhausted when no grid reward reaches it."""
        if self.phase != INIT_PHASE:
            raise InvalidDomain("init_offer is only valid during the init sweep")
        cfg = self.config
        target = float(self.theta_grid[self.init_cursor])
        needed = float(cfg.cost(target, realized_tau))
        pos = (needed - cfg.bounds.gamma_lo) / cfg.bounds.xi
        idx = int(math.ceil(pos - GRID_SNAP / cfg.bounds.xi))
        if idx >= self.reward_grid.size:
            raise GridExhausted(
                f"no grid reward covers cost {needed} at theta={target}"
            )
        gamma = float(self.reward_grid[max(idx, 0)])
        scheme = full_revelation_scheme(cfg.prior)
        thresholds = tuple(
            threshold(gamma, mu, cfg.cost, cfg.bounds) for mu, _ in scheme.support
        )
        predicted = gamma * self.estimator.ucb_index(self.init_cursor)
        self._pending_bucket = self.init_cursor
        return MechanismChoice(
            gamma=gamma,
            scheme=scheme,
            predicted_cost=predicted,
            threshold_by_mu=thresholds,
        )

    def record_no_offer(self) -> None:
        """Init-sweep fallback when the reward grid cannot reach the target:
        the bucket is charged one no-join pull and the sweep continues."""
        if self.phase != INIT_PHASE:
            raise InvalidDomain("record_no_offer is only valid during the init sweep")
        self.estimator.record_index(self.init_cursor, False)
        self.choice_history.append(
            HistoryEntry(self.round + 1, None, None, None, None, None, False)
        )
        self._advance_after_observe()

    # -- adaptive selection ------------------------------------------------------

    def select_round(
        self, true_survival: Optional[SurvivalModel] = None
    ) -> MechanismChoice:
        """Cheapest feasible grid reward under the current participation
        estimates (or under the true survival in known-survival mode)."""
        if self.phase != ADAPTIVE_PHASE:
            raise InvalidDomain("select_round requires the adaptive phase")
        if self._table is None:
            self._build_table()
        if self._gammas_f.size == 0:
            raise Infeasible("every grid reward is unbracketable or below beta")
        if true_survival is None:
            values = self.estimator.ucb_array()
        else:
            values = np.clip(
                np.asarray(true_survival(self.theta_grid), dtype=float), 0.0, 1.0
            )
        costs = self._gammas_f * (
            self._w0 * values[self._b0] + self._w1 * values[self._b1]
        )
        best = int(np.argmin(costs))  # first minimum = smallest gamma
        entry = self._feasible_entries[best]
        return MechanismChoice(
            gamma=entry.gamma,
            scheme=entry.scheme,
            predicted_cost=float(costs[best]),
            threshold_by_mu=entry.thresholds,
        )

    # -- feedback ------------------------------------------------------------------

    def observe(
        self, choice: MechanismChoice, realized_mu: float, joined: bool
    ) -> None:
        """Record the realized outcome into the threshold bucket the client
        actually faced and advance the round."""
        if self.phase == INIT_PHASE:
            bucket = self._pending_bucket
            if bucket is None:
                raise InvalidDomain("observe without a pending init offer")
            self._pending_bucket = None
        else:
            thr = choice.threshold_at(realized_mu)
            if thr is None:
                raise InvalidDomain("adaptive offers always induce a real threshold")
            bucket = self.estimator.bucket_index(self._snap_up(thr))
        self.estimator.record_index(bucket, joined)
        mus = [mu for mu, _ in choice.scheme.support]
        weights = [w for _, w in choice.scheme.support]
        self.choice_history.append(
            HistoryEntry(
                round=self.round + 1,
                gamma=choice.gamma,
                mu_l=mus[0],
                mu_r=mus[-1],
                w_l=weights[0],
                predicted_cost=choice.predicted_cost,
                converged=False,
            )
        )
        self._advance_after_observe()

    def _snap_up(self, thr: float) -> float:
        pos = (thr - self.config.bounds.theta_lo) / self.config.bounds.xi
        idx = min(
            max(int(math.ceil(pos - GRID_SNAP / self.config.bounds.xi)), 0),
            self.theta_grid.size - 1,
        )
        return float(self.theta_grid[idx])

    def _advance_after_observe(self) -> None:
        self.round += 1
        if self.phase == INIT_PHASE:
            self.init_cursor += 1
            if self.init_cursor >= self.theta_grid.size:
                self.phase = ADAPTIVE_PHASE
        else:
            self.choice_history[-1].converged = self.has_converged()

    # -- convergence ---------------------------------------------------------------

    def has_converged(self) -> bool:
        """True when the selected reward was identical over the last
        convergence-window adaptive rounds."""
        if self.phase != ADAPTIVE_PHASE:
            return False
        window = self.config.convergence_window
        # once at least `window` adaptive rounds exist, the last `window`
        # history entries are all adaptive
        if len(self.choice_history) < self.theta_grid.size + window:
            return False
        last = self.choice_history[-1].gamma
        if last is None:
            return False
        for entry in self.choice_history[-window:]:
            if entry.gamma != last:
                return False
        self.converged_gamma = last
        return True

    # -- checkpointing --------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "init_cursor": self.init_cursor,
            "round": self.round,
            "converged_gamma": self.converged_gamma,
            "estimator": self.estimator.to_dict(),
            "choice_history": [
                {
                    "round": h.round,
                    "gamma": h.gamma,
                    "mu_l": h.mu_l,
                    "mu_r": h.mu_r,
                    "w_l": h.w_l,
                    "predicted_cost": h.predicted_cost,
                    "converged": h.converged,
                }
                for h in self.choice_history
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict, config: EngineConfig) -> "DaringFedEngine":
        engine = cls(config)
        engine.phase = data["phase"]
        engine.init_cursor = int(data["init_cursor"])
        engine.round = int(data["round"])
        engine.converged_gamma = data["converged_gamma"]
        engine.estimator = EstimatorState.from_dict(
            data["estimator"], window=config.estimator_window
        )
        engine.choice_history = [
            HistoryEntry(
                round=h["round"],
                gamma=h["gamma"],
                mu_l=h["mu_l"],
                mu_r=h["mu_r"],
                w_l=h["w_l"],
                predicted_cost=h["predicted_cost"],
                converged=h["converged"],
            )
            for h in data["choice_history"]
        ]
        return engine
