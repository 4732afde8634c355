"""Verification battery: optimality gap, scheme identities, bound coverage,
and determinism, bundled for the command-line ``verify`` workflow.

Each check returns (name, passed, details).  The battery is honest: a check
that cannot be computed raises instead of passing vacuously.
"""

from __future__ import annotations

import math
from dataclasses import replace
import numpy as np

from .config import Runtime
from .design import optimal_design_known_s
from .engine import ADAPTIVE_PHASE, DaringFedEngine
from .mechanism import (
    CommPrior,
    SignalScheme,
    additive_quadratic_cost,
    build_scheme,
    check_bayes_benefit,
    make_participation_fn,
    server_cost,
    threshold,
    two_point_split,
)
from .simulation import run_simulation

Check = tuple[str, bool, dict]


def _random_mean_preserving_scheme(
    rng: np.random.Generator, prior: CommPrior
) -> SignalScheme:
    """Random mixture of mean-preserving two-point supports."""
    lo, hi, m = prior.tau_lo, prior.tau_hi, prior.mean
    pieces = int(rng.integers(1, 4))
    support: dict[float, float] = {}
    shares = rng.dirichlet(np.ones(pieces))
    for share in shares:
        mu_l = float(rng.uniform(lo, m))
        mu_r = float(rng.uniform(m, hi))
        if mu_r - mu_l < 1e-9:
            mu_l, mu_r = lo, hi
        w_l, w_r = two_point_split(m, mu_l, mu_r)
        support[mu_l] = support.get(mu_l, 0.0) + share * w_l
        support[mu_r] = support.get(mu_r, 0.0) + share * w_r
    return build_scheme(sorted(support.items()), prior)


def check_optimality_gap(runtime: Runtime) -> list[Check]:
    """Known-survival mode: grid-engine cost within 2*xi of the fine oracle,
    and the chosen reward within the same bracket of the oracle's."""
    bounds, prior = runtime.bounds, runtime.prior
    cost, survival = runtime.cost, runtime.survival
    engine = DaringFedEngine(replace(runtime.engine_config, signaling=True))
    engine.phase = ADAPTIVE_PHASE
    choice = engine.select_round(true_survival=survival)
    participation = make_participation_fn(cost, survival, bounds)
    engine_cost = server_cost(choice.gamma, choice.scheme, participation)
    fine_step = runtime.config["design"]["fine_step"]
    oracle = optimal_design_known_s(
        cost, survival, prior, bounds, beta=runtime.beta,
        fine_step=None if fine_step is None else float(fine_step),
    )
    gap = engine_cost - oracle.predicted_cost
    bound = 2 * bounds.xi + 1e-9
    bracket_ok = (
        oracle.gamma - 1e-12 <= choice.gamma <= oracle.gamma + 2 * bounds.xi + 1e-12
    )
    return [
        (
            "optimality_gap",
            gap <= bound,
            {
                "engine_gamma": choice.gamma,
                "engine_cost": engine_cost,
                "oracle_gamma": oracle.gamma,
                "oracle_cost": oracle.predicted_cost,
                "gap": gap,
                "bound": bound,
            },
        ),
        (
            "reward_bracket",
            bracket_ok,
            {"engine_gamma": choice.gamma, "oracle_gamma": oracle.gamma},
        ),
    ]


def check_scheme_identities(
    runtime: Runtime, n_schemes: int = 200, corrupt: bool = False
) -> list[Check]:
    """Randomized schemes plus every scheme the engine can emit must satisfy
    the consistency, plausibility, and reconstruction identities."""
    rng = np.random.default_rng(20240)
    worst = {"consistency": 0.0, "plausibility": 0.0, "reconstruction": 0.0}
    schemes: list[SignalScheme] = []
    for _ in range(n_schemes):
        schemes.append(_random_mean_preserving_scheme(rng, runtime.prior))
    engine = DaringFedEngine(runtime.engine_config)
    for entry in engine.bracket_table():
        if entry.feasible:
            schemes.append(entry.scheme)
    if corrupt:
        bad = schemes[0]
        support = list(bad.support)
        support[0] = (support[0][0] + 0.05, support[0][1])
        schemes[0] = SignalScheme(
            support=tuple(support),
            conditionals=bad.conditionals,
            prior_atoms=bad.prior_atoms,
            prior_mean=bad.prior_mean,
        )
    ok = True
    for scheme in schemes:
        res = scheme.residuals()
        for key in worst:
            worst[key] = max(worst[key], res[key])
        ok = ok and res["consistency"] <= 1e-9 and res["plausibility"] <= 1e-9
        ok = ok and res["reconstruction"] <= 1e-12
    worst["schemes_checked"] = len(schemes)
    return [("scheme_identities", ok, worst)]


def check_persuasion_benefit(runtime: Runtime, n_schemes: int = 200) -> list[Check]:
    """Under a participation curve verified concave in the posterior mean,
    the benefit residual of mean-preserving schemes is non-negative."""
    bounds, prior = runtime.bounds, runtime.prior
    cost = additive_quadratic_cost()
    participation = make_participation_fn(cost, runtime.survival, bounds)
    gamma = 0.45
    mus = np.linspace(bounds.tau_lo, bounds.tau_hi, 33)
    curve = np.array([participation(gamma, float(m)) for m in mus])
    concave = bool(np.all(np.diff(curve, n=2) <= 1e-8))
    rng = np.random.default_rng(77)
    min_residual = math.inf
    for _ in range(n_schemes):
        scheme = _random_mean_preserving_scheme(rng, prior)
        min_residual = min(
            min_residual, check_bayes_benefit(scheme, gamma, participation, prior)
        )
    ok = concave and min_residual >= -1e-9
    return [
        (
            "persuasion_benefit",
            ok,
            {"participation_concave": concave, "min_residual": min_residual},
        )
    ]


def check_bound_coverage(runtime: Runtime) -> list[Check]:
    """The clamped optimistic bound covers the true rate in at least a
    1 - 1/N fraction of simulated histories."""
    rng = np.random.default_rng(4242)
    n_rounds = 200
    p_true = make_participation_fn(runtime.cost, runtime.survival, runtime.bounds)(
        0.04, runtime.prior.mean
    )
    joins = rng.binomial(n_rounds, p_true, size=1000)
    bonus = math.sqrt(math.log(n_rounds) / (2 * n_rounds))
    covered = np.minimum(1.0, joins / n_rounds + bonus) >= p_true
    frac = float(covered.mean())
    return [
        (
            "bound_coverage",
            frac >= 1.0 - 1.0 / n_rounds,
            {"fraction": frac, "required": 1.0 - 1.0 / n_rounds},
        )
    ]


def check_threshold_inversion(runtime: Runtime) -> list[Check]:
    """Bisection thresholds agree with the analytic inversion when the cost
    model provides one."""
    bounds, cost = runtime.bounds, runtime.cost
    if cost.invert_theta is None:
        return [("threshold_inversion", True, {"skipped": "no analytic inverse"})]
    worst = 0.0
    for gamma in np.linspace(0.005, 0.95, 20):
        for mu in np.linspace(bounds.tau_lo, bounds.tau_hi, 15):
            root = float(np.asarray(cost.invert_theta(gamma, mu)))
            expected = None
            if root <= bounds.theta_hi:
                expected = max(root, bounds.theta_lo)
            got = threshold(float(gamma), float(mu), cost, bounds)
            if expected is None or got is None:
                if expected is not got:
                    return [
                        (
                            "threshold_inversion",
                            False,
                            {"gamma": float(gamma), "mu": float(mu)},
                        )
                    ]
                continue
            worst = max(worst, abs(got - expected))
    return [("threshold_inversion", worst <= 1e-8, {"max_error": worst})]


def check_determinism(runtime: Runtime) -> list[Check]:
    """Identical seeds replay to identical round streams."""

    def run():
        return run_simulation(
            runtime.engine_config,
            runtime.population(),
            "DF",
            max(200, runtime.bounds.theta_grid().size + 50),
            seed=int(runtime.config["seed"]),
            toy=runtime.toy,
        ).records

    same = run() == run()
    return [("determinism", same, {})]


def run_battery(runtime: Runtime) -> list[Check]:
    corrupt = bool(runtime.config["verify"]["corrupt_scheme"])
    checks: list[Check] = []
    checks += check_optimality_gap(runtime)
    checks += check_scheme_identities(runtime, corrupt=corrupt)
    checks += check_persuasion_benefit(runtime)
    checks += check_bound_coverage(runtime)
    checks += check_threshold_inversion(runtime)
    checks += check_determinism(runtime)
    return checks
