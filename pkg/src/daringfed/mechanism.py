"""Closed-form mechanism mathematics.

Participation thresholds, participation probabilities, two-point posterior
splits, conditional signal construction, signal-scheme validation, and the
expected per-round server cost.  Everything here is a pure function of its
inputs; results are bit-identical regardless of evaluation order.

Conventions: theta is a client's computation resource, tau the server's
communication allocation, mu a posterior mean over tau, gamma a reward.
A client joins iff the offered reward covers its cost, so the participation
threshold for (gamma, mu) is the least theta with c(theta, mu) <= gamma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    ConfigError,
    DegenerateSplit,
    InvalidDomain,
    PlausibilityViolation,
    SchemeInvariantError,
    ZeroMassAtom,
)

# Identities exact in rational arithmetic are held to RATIONAL_TOL; identities
# that pass through probability arithmetic to PROB_TOL.
RATIONAL_TOL = 1e-12
PROB_TOL = 1e-9
THETA_BISECT_TOL = 1e-10
MU_BISECT_TOL = 1e-12
BISECT_MAX_ITER = 200
GRID_SNAP = 1e-9


# ---------------------------------------------------------------------------
# Domain boxes and grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResourceBounds:
    """Domain box for communication/computation resources plus the common
    grid step shared by the reward and threshold grids."""

    tau_lo: float = 0.1
    tau_hi: float = 0.9
    theta_lo: float = 0.1
    theta_hi: float = 0.9
    xi: float = 0.01
    gamma_lo: float = 0.0
    gamma_hi: float = 1.0

    def __post_init__(self) -> None:
        if not self.tau_lo < self.tau_hi:
            raise ConfigError("tau_lo must be < tau_hi")
        if not self.theta_lo < self.theta_hi:
            raise ConfigError("theta_lo must be < theta_hi")
        if not self.gamma_lo < self.gamma_hi:
            raise ConfigError("gamma_lo must be < gamma_hi")
        if not self.xi > 0:
            raise ConfigError("xi must be positive")
        for name, width in (
            ("theta", self.theta_hi - self.theta_lo),
            ("gamma", self.gamma_hi - self.gamma_lo),
        ):
            steps = width / self.xi
            if abs(width - round(steps) * self.xi) > RATIONAL_TOL:
                raise ConfigError(f"{name} range is not an integer multiple of xi")

    def theta_grid(self) -> np.ndarray:
        n = int(round((self.theta_hi - self.theta_lo) / self.xi))
        return self.theta_lo + np.arange(n + 1) * self.xi

    def reward_grid(self) -> np.ndarray:
        n = int(round((self.gamma_hi - self.gamma_lo) / self.xi))
        return self.gamma_lo + np.arange(n + 1) * self.xi


def grid_ceil_index(value: float, lo: float, step: float, size: int) -> int:
    """Index of the smallest grid point >= value, with snap-to-grid slack."""
    pos = (value - lo) / step
    idx = int(math.ceil(pos - GRID_SNAP))
    return min(max(idx, 0), size - 1)


def on_grid(value: float, lo: float, step: float) -> bool:
    pos = (value - lo) / step
    return abs(pos - round(pos)) <= GRID_SNAP / step * 1.0 or abs(
        value - (lo + round(pos) * step)
    ) <= GRID_SNAP


# ---------------------------------------------------------------------------
# Two-atom communication prior
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CommPrior:
    """Discrete prior over the communication resource, kept in canonical
    two-atom form: all mass sits at tau_lo and tau_hi.  A general discrete
    prior is reduced to the unique two-atom prior with the same mean, since
    the constructed schemes only ever use the extremes and the mean."""

    atoms: tuple[tuple[float, float], ...]
    mean: float

    @classmethod
    def canonical(
        cls, atoms: list[tuple[float, float]], bounds: ResourceBounds
    ) -> "CommPrior":
        if not atoms:
            raise ConfigError("prior needs at least one atom")
        total = sum(m for _, m in atoms)
        if abs(total - 1.0) > RATIONAL_TOL:
            raise ConfigError(f"prior masses sum to {total}, not 1")
        for v, m in atoms:
            if m < -RATIONAL_TOL or m > 1 + RATIONAL_TOL:
                raise ConfigError("prior masses must lie in [0, 1]")
            if v < bounds.tau_lo - RATIONAL_TOL or v > bounds.tau_hi + RATIONAL_TOL:
                raise ConfigError(f"prior atom {v} outside [tau_lo, tau_hi]")
        mean = sum(v * m for v, m in atoms)
        span = bounds.tau_hi - bounds.tau_lo
        mass_hi = (mean - bounds.tau_lo) / span
        mass_lo = 1.0 - mass_hi
        return cls(
            atoms=((bounds.tau_lo, mass_lo), (bounds.tau_hi, mass_hi)), mean=mean
        )

    @classmethod
    def uniform_equivalent(cls, bounds: ResourceBounds) -> "CommPrior":
        """Mean-equivalent two-atom reduction of a uniform tau distribution."""
        return cls.canonical([(bounds.tau_lo, 0.5), (bounds.tau_hi, 0.5)], bounds)

    @property
    def tau_lo(self) -> float:
        return self.atoms[0][0]

    @property
    def tau_hi(self) -> float:
        return self.atoms[1][0]

    @property
    def mass_lo(self) -> float:
        return self.atoms[0][1]

    @property
    def mass_hi(self) -> float:
        return self.atoms[1][1]


# ---------------------------------------------------------------------------
# Cost and survival models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    """Client cost c(theta, mu): non-increasing and convex in each argument,
    and non-negative on the domain box.

    ``fn`` must accept scalars or numpy arrays elementwise.  ``invert_theta``
    optionally returns the unclamped root of c(theta, mu) = gamma in theta
    (``inf`` when no root exists); it is used as a fast, independent route in
    grid sweeps and is cross-checked against bisection in the tests.
    """

    form: str
    fn: Callable
    invert_theta: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __call__(self, theta, mu):
        return self.fn(theta, mu)


@dataclass(frozen=True)
class SurvivalModel:
    """Survival function s(theta): probability a random client's computation
    resource exceeds theta.  Non-increasing and concave, with values in [0, 1].

    ``inverse_cdf`` maps a uniform draw to a theta sample with
    P(theta >= x) = s(x); when absent the samplers fall back to bisection.
    """

    form: str
    fn: Callable
    inverse_cdf: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __call__(self, theta):
        return self.fn(theta)


def synthetic_quadratic_cost() -> CostModel:
    """Multiplicative quadratic cost (1 - theta)^2 (1.2 - mu)^2."""

    def fn(theta, mu):
        return (1.0 - theta) ** 2 * (1.2 - mu) ** 2

    def invert(gamma, mu):
        # (1 - theta)(1.2 - mu) = sqrt(gamma) on the box, both factors > 0.
        return 1.0 - np.sqrt(gamma) / (1.2 - mu)

    return CostModel(form="quadratic_synthetic", fn=fn, invert_theta=invert)


def additive_quadratic_cost(mu_weight: float = 0.25) -> CostModel:
    """Separable quadratic cost (1 - theta)^2 + w (1.2 - mu)^2.

    Jointly convex, so the induced participation threshold is convex in mu
    and the induced participation probability is concave in mu; the
    multiplicative synthetic form does not have this property.
    """

    def fn(theta, mu):
        return (1.0 - theta) ** 2 + mu_weight * (1.2 - mu) ** 2

    def invert(gamma, mu):
        rad = gamma - mu_weight * (1.2 - mu) ** 2
        rad = np.asarray(rad, dtype=float)
        out = np.where(rad >= 0.0, 1.0 - np.sqrt(np.maximum(rad, 0.0)), np.inf)
        return out if out.ndim else float(out)

    return CostModel(
        form="quadratic_additive",
        fn=fn,
        invert_theta=invert,
        params={"mu_weight": mu_weight},
    )


def table_cost(
    thetas: list[float], mus: list[float], values: list[list[float]]
) -> CostModel:
    """Bilinear interpolation over a rectangular cost table."""
    t = np.asarray(thetas, dtype=float)
    m = np.asarray(mus, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.shape != (t.size, m.size):
        raise ConfigError("cost table shape does not match its axes")

    def fn(theta, mu):
        theta = np.clip(theta, t[0], t[-1])
        mu = np.clip(mu, m[0], m[-1])
        i = np.clip(np.searchsorted(t, theta) - 1, 0, t.size - 2)
        j = np.clip(np.searchsorted(m, mu) - 1, 0, m.size - 2)
        wt = (theta - t[i]) / (t[i + 1] - t[i])
        wm = (mu - m[j]) / (m[j + 1] - m[j])
        return (
            v[i, j] * (1 - wt) * (1 - wm)
            + v[i + 1, j] * wt * (1 - wm)
            + v[i, j + 1] * (1 - wt) * wm
            + v[i + 1, j + 1] * wt * wm
        )

    return CostModel(form="table", fn=fn, params={"thetas": thetas, "mus": mus})


def synthetic_power_survival(bounds: ResourceBounds, exponent: int = 8) -> SurvivalModel:
    """s(theta) = 1 - ((theta - theta_lo) / width)^k, clipped to [0, 1]."""
    lo, width = bounds.theta_lo, bounds.theta_hi - bounds.theta_lo

    def fn(theta):
        u = np.clip((theta - lo) / width, 0.0, 1.0)
        return 1.0 - u**exponent

    def inverse_cdf(u):
        # F(theta) = 1 - s(theta) = ((theta - lo)/width)^k
        return lo + width * np.asarray(u) ** (1.0 / exponent)

    return SurvivalModel(
        form="power_synthetic",
        fn=fn,
        inverse_cdf=inverse_cdf,
        params={"exponent": exponent},
    )


def constant_survival(value: float = 1.0) -> SurvivalModel:
    if not 0.0 <= value <= 1.0:
        raise ConfigError("constant survival value must lie in [0, 1]")

    def fn(theta):
        return np.full_like(np.asarray(theta, dtype=float), value) if np.ndim(theta) else value

    return SurvivalModel(form="constant", fn=fn, params={"value": value})


def cost_from_descriptor(desc: dict, bounds: ResourceBounds) -> CostModel:
    form = desc.get("form")
    if form == "quadratic_synthetic":
        model = synthetic_quadratic_cost()
    elif form == "quadratic_additive":
        model = additive_quadratic_cost(float(desc.get("mu_weight", 0.25)))
    elif form == "table":
        model = table_cost(desc["thetas"], desc["mus"], desc["values"])
    else:
        raise ConfigError(f"unknown cost form: {form!r}")
    validate_cost_model(model, bounds)
    return model


def survival_from_descriptor(desc: dict, bounds: ResourceBounds) -> SurvivalModel:
    form = desc.get("form")
    if form == "power_synthetic":
        model = synthetic_power_survival(bounds, int(desc.get("exponent", 8)))
    elif form == "constant":
        model = constant_survival(float(desc.get("value", 1.0)))
    else:
        raise ConfigError(f"unknown survival form: {form!r}")
    validate_survival_model(model, bounds)
    return model


def validate_cost_model(
    cost: CostModel, bounds: ResourceBounds, samples: int = 21
) -> None:
    """Sampled checks: c >= 0, non-increasing and convex in each argument."""
    thetas = np.linspace(bounds.theta_lo, bounds.theta_hi, samples)
    mus = np.linspace(bounds.tau_lo, bounds.tau_hi, samples)
    grid = np.asarray(cost(thetas[:, None], mus[None, :]), dtype=float)
    if np.any(grid < -RATIONAL_TOL):
        raise ConfigError("cost model is negative somewhere on the domain box")
    d_theta = np.diff(grid, axis=0)
    d_mu = np.diff(grid, axis=1)
    if np.any(d_theta > PROB_TOL) or np.any(d_mu > PROB_TOL):
        raise ConfigError("cost model is not non-increasing in each argument")
    if np.any(np.diff(grid, n=2, axis=0) < -PROB_TOL) or np.any(
        np.diff(grid, n=2, axis=1) < -PROB_TOL
    ):
        raise ConfigError("cost model is not convex in each argument")


def validate_survival_model(
    survival: SurvivalModel, bounds: ResourceBounds, samples: int = 41
) -> None:
    """Sampled checks: values in [0, 1], non-increasing, concave."""
    thetas = np.linspace(bounds.theta_lo, bounds.theta_hi, samples)
    vals = np.asarray(survival(thetas), dtype=float)
    if np.any(vals < -RATIONAL_TOL) or np.any(vals > 1 + RATIONAL_TOL):
        raise ConfigError("survival values must lie in [0, 1]")
    if np.any(np.diff(vals) > PROB_TOL):
        raise ConfigError("survival model is not non-increasing")
    if np.any(np.diff(vals, n=2) > PROB_TOL):
        raise ConfigError("survival model is not concave")


# ---------------------------------------------------------------------------
# Participation threshold and probability
# ---------------------------------------------------------------------------


def threshold(
    gamma: float, mu: float, cost: CostModel, bounds: ResourceBounds
) -> Optional[float]:
    """Least theta in [theta_lo, theta_hi] with c(theta, mu) <= gamma.

    Returns None when even the best-resourced client's cost exceeds gamma
    (nobody participates).  Roots below theta_lo clamp to theta_lo.  Found by
    bisection, valid because the cost is non-increasing in theta.
    """
    if not math.isfinite(gamma) or gamma < 0.0:
        raise InvalidDomain(f"gamma={gamma} must be finite and non-negative")
    if not bounds.tau_lo - RATIONAL_TOL <= mu <= bounds.tau_hi + RATIONAL_TOL:
        raise InvalidDomain(f"mu={mu} outside [{bounds.tau_lo}, {bounds.tau_hi}]")
    if cost(bounds.theta_hi, mu) > gamma:
        return None
    if cost(bounds.theta_lo, mu) <= gamma:
        return bounds.theta_lo
    lo, hi = bounds.theta_lo, bounds.theta_hi  # cost(lo) > gamma >= cost(hi)
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if cost(mid, mu) <= gamma:
            hi = mid
        else:
            lo = mid
        if hi - lo <= THETA_BISECT_TOL:
            break
    return hi


def participation_prob(
    gamma: float,
    mu: float,
    cost: CostModel,
    survival: SurvivalModel,
    bounds: ResourceBounds,
) -> float:
    """Probability that a random client joins at reward gamma and belief mu."""
    t = threshold(gamma, mu, cost, bounds)
    if t is None:
        return 0.0
    return float(min(1.0, max(0.0, survival(t))))


def make_participation_fn(
    cost: CostModel, survival: SurvivalModel, bounds: ResourceBounds
) -> Callable[[float, float], float]:
    """Bind (cost, survival, bounds) into an s(gamma, mu) callable."""

    def fn(gamma: float, mu: float) -> float:
        return participation_prob(gamma, mu, cost, survival, bounds)

    return fn


def solve_mu_for_threshold(
    gamma: float, theta_target: float, cost: CostModel, bounds: ResourceBounds
) -> Optional[float]:
    """Posterior mean mu with c(theta_target, mu) = gamma, or None when no
    such mu exists in [tau_lo, tau_hi].  The cost is non-increasing in mu, so
    a single bisection suffices."""
    c_lo = cost(theta_target, bounds.tau_lo)
    c_hi = cost(theta_target, bounds.tau_hi)
    if gamma > c_lo + RATIONAL_TOL or gamma < c_hi - RATIONAL_TOL:
        return None
    lo, hi = bounds.tau_lo, bounds.tau_hi  # cost(lo) >= gamma >= cost(hi)
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if cost(theta_target, mid) <= gamma:
            hi = mid
        else:
            lo = mid
        if hi - lo <= MU_BISECT_TOL:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Signal schemes
# ---------------------------------------------------------------------------


def two_point_split(
    target_mean: float, mu_l: float, mu_r: float
) -> tuple[float, float]:
    """Weights (w_l, w_r) putting the mean of {mu_l, mu_r} at target_mean.

    Mean preservation w_l*mu_l + w_r*mu_r = target_mean holds exactly.  When
    both points coincide with the mean the convention is (1, 0).
    """
    if mu_r < mu_l:
        raise InvalidDomain("mu_l must be <= mu_r")
    if mu_r - mu_l < 1e-15:
        if abs(mu_l - target_mean) <= RATIONAL_TOL:
            return 1.0, 0.0
        raise DegenerateSplit(
            f"coincident points at {mu_l} cannot average to {target_mean}"
        )
    if not mu_l - RATIONAL_TOL <= target_mean <= mu_r + RATIONAL_TOL:
        raise InvalidDomain("target mean must lie between the two points")
    w_l = (mu_r - target_mean) / (mu_r - mu_l)
    w_l = min(1.0, max(0.0, w_l))
    return w_l, 1.0 - w_l


def conditional_signals(
    mu: float, weight: float, prior: CommPrior
) -> tuple[float, float]:
    """Conditional probabilities (rho_lo, rho_hi) of emitting the signal that
    induces posterior mean mu, given the true state is the low resp. high
    prior atom.  Satisfies the reconstruction identity
    weight = mass_lo*rho_lo + mass_hi*rho_hi exactly."""
    (t_lo, m_lo), (t_hi, m_hi) = prior.atoms
    if m_lo <= 0.0 or m_hi <= 0.0:
        raise ZeroMassAtom("both prior atoms need strictly positive mass")
    if not t_lo - RATIONAL_TOL <= mu <= t_hi + RATIONAL_TOL:
        raise InvalidDomain(f"mu={mu} outside the prior's atom span")
    if weight < -RATIONAL_TOL or weight > 1 + RATIONAL_TOL:
        raise InvalidDomain("weight must lie in [0, 1]")
    span = t_hi - t_lo
    rho_lo = weight * (t_hi - mu) / (m_lo * span)
    rho_hi = weight * (mu - t_lo) / (m_hi * span)
    return max(rho_lo, 0.0), max(rho_hi, 0.0)


@dataclass(frozen=True)
class SignalScheme:
    """Finite-support distribution over posterior means, together with the
    per-atom conditional signal probabilities that realize it."""

    support: tuple[tuple[float, float], ...]
    conditionals: tuple[tuple[float, ...], ...]
    prior_atoms: tuple[tuple[float, float], ...]
    prior_mean: float

    def mus(self) -> np.ndarray:
        return np.array([mu for mu, _ in self.support])

    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.support])

    def conditional_row(self, true_tau: float) -> tuple[float, ...]:
        for (value, _), row in zip(self.prior_atoms, self.conditionals):
            if abs(value - true_tau) <= GRID_SNAP:
                return row
        raise InvalidDomain(f"{true_tau} is not a prior atom")

    def residuals(self) -> dict[str, float]:
        """Worst-case residual of each validity identity."""
        mus = self.mus()
        weights = self.weights()
        masses = np.array([m for _, m in self.prior_atoms])
        values = np.array([v for v, _ in self.prior_atoms])
        rho = np.array(self.conditionals)

        out = {
            "weight_sum": abs(float(weights.sum()) - 1.0),
            "row_sums": float(np.max(np.abs(rho.sum(axis=1) - 1.0))),
            "reconstruction": float(np.max(np.abs(masses @ rho - weights))),
            "plausibility": abs(float(weights @ mus) - self.prior_mean),
        }
        consistency = 0.0
        for j, mu in enumerate(mus):
            den = float(masses @ rho[:, j])
            if den > 1e-15:
                num = float((masses * values) @ rho[:, j])
                consistency = max(consistency, abs(num / den - mu))
        out["consistency"] = consistency
        return out

    def validate(self) -> dict[str, float]:
        res = self.residuals()
        mus = self.mus()
        lo, hi = self.prior_atoms[0][0], self.prior_atoms[1][0]
        if np.any(mus < lo - RATIONAL_TOL) or np.any(mus > hi + RATIONAL_TOL):
            raise SchemeInvariantError("support point outside the prior's span")
        checks = (
            ("weight_sum", RATIONAL_TOL),
            ("row_sums", RATIONAL_TOL),
            ("reconstruction", RATIONAL_TOL),
            ("consistency", PROB_TOL),
            ("plausibility", PROB_TOL),
        )
        for name, tol in checks:
            if res[name] > tol:
                raise SchemeInvariantError(f"{name} residual {res[name]:.3e} > {tol}")
        return res


def build_scheme(
    support: list[tuple[float, float]], prior: CommPrior
) -> SignalScheme:
    """Assemble and validate a scheme from (mu, weight) support points.

    The per-atom conditional rows come from the two-atom signal formulas; the
    input must already be mean-preserving w.r.t. the prior.
    """
    weights_total = sum(w for _, w in support)
    if abs(weights_total - 1.0) > PROB_TOL:
        raise InvalidDomain(f"support weights sum to {weights_total}, not 1")
    mean = sum(mu * w for mu, w in support)
    if abs(mean - prior.mean) > PROB_TOL:
        raise PlausibilityViolation(
            f"support mean {mean} does not match the prior mean {prior.mean}"
        )
    rows_lo = []
    rows_hi = []
    for mu, w in support:
        rho_lo, rho_hi = conditional_signals(mu, w, prior)
        rows_lo.append(rho_lo)
        rows_hi.append(rho_hi)
    scheme = SignalScheme(
        support=tuple((float(mu), float(w)) for mu, w in support),
        conditionals=(tuple(rows_lo), tuple(rows_hi)),
        prior_atoms=prior.atoms,
        prior_mean=prior.mean,
    )
    scheme.validate()
    return scheme


def full_pooling_scheme(prior: CommPrior) -> SignalScheme:
    """Uninformative scheme: every signal induces the prior mean."""
    return build_scheme([(prior.mean, 1.0)], prior)


def full_revelation_scheme(prior: CommPrior) -> SignalScheme:
    """Perfectly informative scheme: the signal is the true atom."""
    return build_scheme(list(prior.atoms), prior)


# ---------------------------------------------------------------------------
# Server cost and the persuasion-benefit residual
# ---------------------------------------------------------------------------


def server_cost(
    gamma: float,
    scheme: SignalScheme,
    surv_fn: Callable[[float, float], float],
    prior: Optional[CommPrior] = None,
) -> float:
    """Expected per-round payment gamma * sum_mu weight(mu) * s(gamma, mu).

    Equal to the double sum over prior atoms and conditional rows by the
    reconstruction identity.
    """
    total = 0.0
    for mu, w in scheme.support:
        if w > 0.0:
            total += w * surv_fn(gamma, mu)
    return gamma * total


def check_bayes_benefit(
    scheme: SignalScheme,
    gamma: float,
    surv_fn: Callable[[float, float], float],
    prior: Optional[CommPrior] = None,
) -> float:
    """Signed residual: expected participation under the scheme minus
    expected participation under direct disclosure of the true atom.
    Non-negative means signaling does not reduce participation."""
    atoms = prior.atoms if prior is not None else scheme.prior_atoms
    with_scheme = sum(w * surv_fn(gamma, mu) for mu, w in scheme.support if w > 0.0)
    without = sum(m * surv_fn(gamma, v) for v, m in atoms)
    return with_scheme - without


@dataclass(frozen=True)
class MechanismChoice:
    """A (reward, scheme) pair with its predicted cost and the participation
    threshold induced at each support point (None = nobody joins there)."""

    gamma: float
    scheme: SignalScheme
    predicted_cost: float
    threshold_by_mu: tuple[Optional[float], ...]

    def threshold_at(self, mu: float) -> Optional[float]:
        for (support_mu, _), t in zip(self.scheme.support, self.threshold_by_mu):
            if abs(support_mu - mu) <= GRID_SNAP:
                return t
        raise InvalidDomain(f"{mu} is not a support point of this choice")
