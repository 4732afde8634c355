"""Environment simulation: client arrivals, signal realization, participation
decisions, toy global-model updates, policy variants, and the improvement
heatmap sweep.

Every run is single-threaded and fully determined by its seed.  Three
independent generator streams are derived from the seed: client draws
(theta, tau), signal realization, and model noise.  Policies that make the
same offers therefore see identical client streams, which makes paired-seed
comparisons meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .engine import ADAPTIVE_PHASE, DaringFedEngine, EngineConfig, bracket_mus
from .errors import ConfigError, DimensionMismatch, GridExhausted, Unbracketable
from .mechanism import (
    CommPrior,
    CostModel,
    ResourceBounds,
    SignalScheme,
    SurvivalModel,
    build_scheme,
    full_pooling_scheme,
    threshold,
    two_point_split,
)

POLICIES = ("DF", "DF-B", "DF-D", "DF-BD")


# ---------------------------------------------------------------------------
# Client population
# ---------------------------------------------------------------------------


def _survival_matched_sampler(
    survival: SurvivalModel, bounds: ResourceBounds
) -> Callable[[np.random.Generator], float]:
    """Sample theta so that P(theta >= x) equals the survival function,
    via the inverse CDF of F = 1 - s."""
    if survival.inverse_cdf is not None:
        inv = survival.inverse_cdf
    else:
        def inv(u):
            lo, hi = bounds.theta_lo, bounds.theta_hi
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if 1.0 - survival(mid) < u:
                    lo = mid
                else:
                    hi = mid
            return 0.5 * (lo + hi)

    def sample(rng: np.random.Generator) -> float:
        theta = float(inv(rng.random()))
        return min(max(theta, bounds.theta_lo), bounds.theta_hi)

    return sample


def build_theta_sampler(
    descriptor: dict, survival: SurvivalModel, bounds: ResourceBounds
) -> Callable[[np.random.Generator], float]:
    kind = descriptor.get("kind", "survival_matched")
    if kind == "survival_matched":
        return _survival_matched_sampler(survival, bounds)
    if kind == "uniform":
        lo = float(descriptor.get("lo", bounds.theta_lo))
        hi = float(descriptor.get("hi", bounds.theta_hi))
        if not bounds.theta_lo - 1e-12 <= lo < hi <= bounds.theta_hi + 1e-12:
            raise ConfigError("uniform theta range outside the domain box")
        return lambda rng: float(rng.uniform(lo, hi))
    if kind == "point":
        value = float(descriptor["value"])
        if not bounds.theta_lo <= value <= bounds.theta_hi:
            raise ConfigError("point theta outside the domain box")
        return lambda rng: value
    raise ConfigError(f"unknown theta distribution kind: {kind!r}")


@dataclass
class ClientPopulation:
    """Arriving-client generator: theta from a configurable distribution,
    tau from the canonical two-atom prior, with an optional schedule of
    distribution shifts keyed by round number."""

    prior: CommPrior
    survival: SurvivalModel
    bounds: ResourceBounds
    theta_dist: dict = field(default_factory=lambda: {"kind": "survival_matched"})
    shift_schedule: tuple[tuple[int, dict], ...] = ()

    def __post_init__(self) -> None:
        self._sampler = build_theta_sampler(
            self.theta_dist, self.survival, self.bounds
        )
        self._shifts = sorted(self.shift_schedule, key=lambda rs: rs[0])
        self._atom_values = np.array([v for v, _ in self.prior.atoms])
        self._atom_masses = np.array([m for _, m in self.prior.atoms])

    def apply_shift(self, round_no: int) -> None:
        while self._shifts and self._shifts[0][0] <= round_no:
            _, descriptor = self._shifts.pop(0)
            self._sampler = build_theta_sampler(
                descriptor, self.survival, self.bounds
            )

    def sample_theta(self, rng: np.random.Generator) -> float:
        return self._sampler(rng)

    def sample_tau(self, rng: np.random.Generator) -> float:
        return float(rng.choice(self._atom_values, p=self._atom_masses))


# ---------------------------------------------------------------------------
# Signal realization and the participation rule
# ---------------------------------------------------------------------------


def realize_signal(
    scheme: SignalScheme, true_tau: float, rng: np.random.Generator
) -> float:
    """Draw a support point with the conditional probabilities for the true
    communication state."""
    row = np.array(scheme.conditional_row(true_tau))
    total = row.sum()
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"conditional row sums to {total}, not 1")
    mus = np.array([mu for mu, _ in scheme.support])
    idx = int(rng.choice(mus.size, p=row / total))
    return float(mus[idx])


def client_decide(gamma: float, mu: float, theta: float, cost: CostModel) -> bool:
    """Join iff the reward covers the believed cost; ties join."""
    return bool(cost(theta, mu) <= gamma)


# ---------------------------------------------------------------------------
# Toy global model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyModel:
    """Linear-regression weights merged one client at a time."""

    weights: np.ndarray
    alpha: float = 0.1
    eta: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.eta < 0.0:
            raise ConfigError("eta must be non-negative")


def local_update(model: ToyModel, batch: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """One gradient step of mean squared loss on the local batch."""
    x, y = batch
    if x.shape[0] == 0:
        raise ConfigError("batch must be non-empty")
    residual = x @ model.weights - y
    grad = 2.0 * x.T @ residual / x.shape[0]
    return model.weights - model.eta * grad


def merge(model: ToyModel, local_weights: np.ndarray) -> ToyModel:
    """Blend the local result into the global weights."""
    if local_weights.shape != model.weights.shape:
        raise DimensionMismatch(
            f"local shape {local_weights.shape} != global {model.weights.shape}"
        )
    mixed = (1.0 - model.alpha) * model.weights + model.alpha * local_weights
    return ToyModel(weights=mixed, alpha=model.alpha, eta=model.eta)


@dataclass(frozen=True)
class ToyParams:
    """Synthetic training task.  Clients with scarce computation resources
    train poorly (label noise in their batches plus weight-space noise on
    their local result); scarce communication degrades the upload."""

    dim: int = 10
    batch_size: int = 16
    eta: float = 0.05
    alpha: float = 0.2
    base_noise: float = 0.1
    label_noise: float = 0.5
    train_noise: float = 1.0
    upload_noise: float = 0.05
    loss_window: int = 500


def make_batch(
    rng: np.random.Generator,
    params: ToyParams,
    w_true: np.ndarray,
    theta: float,
    bounds: ResourceBounds,
) -> tuple[np.ndarray, np.ndarray]:
    x = rng.standard_normal((params.batch_size, params.dim))
    frac = (bounds.theta_hi - theta) / (bounds.theta_hi - bounds.theta_lo)
    sigma = params.base_noise + params.label_noise * frac
    y = x @ w_true + sigma * rng.standard_normal(params.batch_size)
    return x, y


def apply_train_noise(
    rng: np.random.Generator,
    params: ToyParams,
    local_weights: np.ndarray,
    theta: float,
    bounds: ResourceBounds,
) -> np.ndarray:
    frac = (bounds.theta_hi - theta) / (bounds.theta_hi - bounds.theta_lo)
    scale = params.train_noise * frac
    if scale == 0.0:
        return local_weights
    return local_weights + scale * rng.standard_normal(local_weights.shape)


def apply_upload_noise(
    rng: np.random.Generator,
    params: ToyParams,
    local_weights: np.ndarray,
    tau: float,
    bounds: ResourceBounds,
) -> np.ndarray:
    frac = (bounds.tau_hi - tau) / (bounds.tau_hi - bounds.tau_lo)
    scale = params.upload_noise * frac
    if scale == 0.0:
        return local_weights
    return local_weights + scale * rng.standard_normal(local_weights.shape)


# ---------------------------------------------------------------------------
# Round records and metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoundRecord:
    round: int
    gamma: float  # nan on no-offer rounds
    realized_mu: float  # nan on no-offer rounds
    client_theta: float
    joined: bool
    payment: float
    model_loss: float


@dataclass
class SimMetrics:
    cumulative_server_cost: float
    participation_rate: float
    gamma_trace: np.ndarray
    theta_hat_trace: np.ndarray
    loss_trace: np.ndarray
    converged: bool
    converged_gamma: Optional[float]
    convergence_round: Optional[int]
    final_loss: float


@dataclass
class SimResult:
    metrics: SimMetrics
    records: list[RoundRecord]
    engine: Optional[DaringFedEngine]


# ---------------------------------------------------------------------------
# Policy loop
# ---------------------------------------------------------------------------


def _fixed_design(
    policy: str,
    fixed_gamma: float,
    cost: CostModel,
    bounds: ResourceBounds,
    prior: CommPrior,
):
    """Per-round (scheme, thresholds) for the fixed-reward baselines."""
    if policy == "DF-D":
        try:
            mu_l, mu_r, z = bracket_mus(fixed_gamma, cost, bounds, prior)
            grid = bounds.theta_grid()
            if mu_r - mu_l >= 1e-15:
                w_l, w_r = two_point_split(prior.mean, mu_l, mu_r)
                scheme = build_scheme([(mu_l, w_l), (mu_r, w_r)], prior)
                return scheme, (float(grid[z]), float(grid[z - 1]))
            scheme = full_pooling_scheme(prior)
            return scheme, (float(grid[z]),)
        except Unbracketable:
            pass  # fall back to pooling when the bracket does not exist
    scheme = full_pooling_scheme(prior)
    thr = threshold(fixed_gamma, prior.mean, cost, bounds)
    return scheme, (thr,)


def run_simulation(
    engine_config: EngineConfig,
    population: ClientPopulation,
    policy: str,
    rounds: int,
    seed: int,
    toy: ToyParams = ToyParams(),
    fixed_gamma: Optional[float] = None,
) -> SimResult:
    """Simulate ``rounds`` one-client time slots under the given policy.

    DF runs the full adaptive engine; DF-B drops the signaling rule (clients
    price at the prior mean) but keeps adaptive rewards; DF-D keeps signaling
    at a fixed reward; DF-BD fixes both.  Non-participation rounds advance
    time with zero payment.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy {policy!r}")
    bounds = engine_config.bounds
    prior = engine_config.prior
    cost = engine_config.cost
    adaptive = policy in ("DF", "DF-B")
    if adaptive and rounds > 0 and rounds < bounds.theta_grid().size:
        raise ConfigError("adaptive policies need at least one round per bucket")
    if not adaptive:
        if fixed_gamma is None:
            grid = engine_config.reward_grid()
            fixed_gamma = float(grid[grid.size // 2])
        reward_grid = engine_config.reward_grid()
        if not np.any(np.abs(reward_grid - fixed_gamma) <= 1e-9):
            raise ConfigError("fixed gamma must lie on the reward grid")

    client_seq, signal_seq, model_seq = np.random.SeedSequence(seed).spawn(3)
    client_rng = np.random.default_rng(client_seq)
    signal_rng = np.random.default_rng(signal_seq)
    model_rng = np.random.default_rng(model_seq)

    engine: Optional[DaringFedEngine] = None
    if adaptive:
        cfg = engine_config
        if policy == "DF-B" and cfg.signaling:
            cfg = EngineConfig(
                bounds=cfg.bounds,
                prior=cfg.prior,
                cost=cfg.cost,
                beta=cfg.beta,
                convergence_window=cfg.convergence_window,
                seed=cfg.seed,
                signaling=False,
                estimator_window=cfg.estimator_window,
            )
        engine = DaringFedEngine(cfg)
    else:
        fixed_scheme, fixed_thresholds = _fixed_design(
            policy, fixed_gamma, cost, bounds, prior
        )

    w_true = model_rng.standard_normal(toy.dim)
    model = ToyModel(
        weights=np.zeros(toy.dim), alpha=toy.alpha, eta=toy.eta
    )

    records: list[RoundRecord] = []
    cumulative = 0.0
    joins = 0
    gamma_trace = np.full(rounds, np.nan)
    theta_hat_trace = np.full(rounds, np.nan)
    loss_trace = np.empty(rounds)

    for t in range(1, rounds + 1):
        population.apply_shift(t)
        tau = population.sample_tau(client_rng)
        theta = population.sample_theta(client_rng)

        choice = None
        if engine is not None:
            if engine.phase != ADAPTIVE_PHASE:
                try:
                    choice = engine.init_offer(tau)
                except GridExhausted:
                    engine.record_no_offer()
            else:
                choice = engine.select_round()
            scheme = choice.scheme if choice is not None else None
        else:
            scheme = fixed_scheme

        if choice is None and engine is not None:
            # forced no-offer init round: time advances, nobody joins
            loss = float(np.sum((model.weights - w_true) ** 2))
            loss_trace[t - 1] = loss
            records.append(
                RoundRecord(t, float("nan"), float("nan"), theta, False, 0.0, loss)
            )
            continue

        gamma = choice.gamma if choice is not None else fixed_gamma
        mu = realize_signal(scheme, tau, signal_rng)
        joined = client_decide(gamma, mu, theta, cost)

        if engine is not None:
            engine.observe(choice, mu, joined)
            thr = choice.threshold_at(mu)
        else:
            idx = int(np.argmin(np.abs(np.array([m for m, _ in scheme.support]) - mu)))
            thr = fixed_thresholds[idx]

        payment = gamma if joined else 0.0
        cumulative += payment
        joins += int(joined)
        if joined:
            batch = make_batch(model_rng, toy, w_true, theta, bounds)
            local = local_update(model, batch)
            local = apply_train_noise(model_rng, toy, local, theta, bounds)
            uploaded = apply_upload_noise(model_rng, toy, local, tau, bounds)
            model = merge(model, uploaded)

        loss = float(np.sum((model.weights - w_true) ** 2))
        gamma_trace[t - 1] = gamma
        theta_hat_trace[t - 1] = np.nan if thr is None else thr
        loss_trace[t - 1] = loss
        records.append(RoundRecord(t, gamma, mu, theta, joined, payment, loss))

    converged = engine.has_converged() if engine is not None else False
    converged_gamma = engine.converged_gamma if engine is not None else None
    convergence_round = None
    if converged:
        final = gamma_trace[-1]
        start = rounds - 1
        while start > 0 and gamma_trace[start - 1] == final:
            start -= 1
        convergence_round = start + 1

    if rounds:
        tail = loss_trace[-min(toy.loss_window, rounds) :]
        final_loss = float(tail.mean())
    else:
        final_loss = float("nan")
    metrics = SimMetrics(
        cumulative_server_cost=cumulative,
        participation_rate=joins / rounds if rounds else 0.0,
        gamma_trace=gamma_trace,
        theta_hat_trace=theta_hat_trace,
        loss_trace=loss_trace,
        converged=converged,
        converged_gamma=converged_gamma,
        convergence_round=convergence_round,
        final_loss=final_loss,
    )
    return SimResult(metrics=metrics, records=records, engine=engine)


# ---------------------------------------------------------------------------
# Improvement heatmap
# ---------------------------------------------------------------------------


@dataclass
class HeatmapResult:
    mu_grid: np.ndarray
    gamma_grid: np.ndarray
    delta_theta: np.ndarray  # rows: gamma, cols: mu; NaN = missing cell
    delta_cost: np.ndarray
    base_cost: np.ndarray


def heatmap_sweep(
    mu_grid: np.ndarray,
    gamma_grid: np.ndarray,
    cost: CostModel,
    survival: SurvivalModel,
    prior: CommPrior,
    bounds: ResourceBounds,
) -> HeatmapResult:
    """Improvement surfaces of the signaling design over the no-signal
    baseline, swept over counterfactual (posterior mean, reward) cells.

    Per cell the signaling design is the extreme-support two-point scheme
    whose mean sits at the cell's mu (the mass splits between the prior's
    atoms); the baseline prices the same reward against a client who believes
    mu directly.  Emitted values are baseline-minus-design, so positive means
    signaling helps.  Cells where any needed threshold is undefined are NaN,
    never zero.
    """
    mu_grid = np.asarray(mu_grid, dtype=float)
    gamma_grid = np.asarray(gamma_grid, dtype=float)
    if mu_grid.min() < bounds.tau_lo - 1e-12 or mu_grid.max() > bounds.tau_hi + 1e-12:
        raise ConfigError("mu grid outside the domain box")
    if gamma_grid.min() < bounds.gamma_lo - 1e-12 or gamma_grid.max() > bounds.gamma_hi + 1e-12:
        raise ConfigError("gamma grid outside the domain box")

    t_lo, t_hi = prior.tau_lo, prior.tau_hi
    delta_theta = np.full((gamma_grid.size, mu_grid.size), np.nan)
    delta_cost = np.full((gamma_grid.size, mu_grid.size), np.nan)
    base_cost = np.full((gamma_grid.size, mu_grid.size), np.nan)

    for i, gamma in enumerate(gamma_grid):
        gamma = float(gamma)
        thr_lo = threshold(gamma, t_lo, cost, bounds)
        thr_hi = threshold(gamma, t_hi, cost, bounds)
        for j, mu in enumerate(mu_grid):
            mu = float(mu)
            thr_mu = threshold(gamma, mu, cost, bounds)
            w_lo, w_hi = two_point_split(mu, t_lo, t_hi)
            needs_lo = w_lo > 0.0
            needs_hi = w_hi > 0.0
            if thr_mu is None or (needs_lo and thr_lo is None) or (
                needs_hi and thr_hi is None
            ):
                continue
            e_theta = w_lo * (thr_lo if needs_lo else 0.0) + w_hi * (
                thr_hi if needs_hi else 0.0
            )
            s_mu = float(survival(thr_mu))
            e_s = w_lo * (float(survival(thr_lo)) if needs_lo else 0.0) + w_hi * (
                float(survival(thr_hi)) if needs_hi else 0.0
            )
            delta_theta[i, j] = thr_mu - e_theta
            base_cost[i, j] = gamma * s_mu
            delta_cost[i, j] = gamma * (s_mu - e_s)

    return HeatmapResult(
        mu_grid=mu_grid,
        gamma_grid=gamma_grid,
        delta_theta=delta_theta,
        delta_cost=delta_cost,
        base_cost=base_cost,
    )


def argmax_cell(surface: np.ndarray) -> Optional[tuple[int, int]]:
    """Index of the largest finite cell, or None when everything is missing."""
    if not np.isfinite(surface).any():
        return None
    flat = np.nanargmax(np.where(np.isfinite(surface), surface, -np.inf))
    return tuple(np.unravel_index(flat, surface.shape))  # type: ignore[return-value]
