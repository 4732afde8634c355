import pytest

from daringfed.mechanism import (
    CommPrior,
    ResourceBounds,
    additive_quadratic_cost,
    synthetic_power_survival,
    synthetic_quadratic_cost,
)


@pytest.fixture(scope="session")
def bounds():
    return ResourceBounds()


@pytest.fixture(scope="session")
def prior(bounds):
    return CommPrior.uniform_equivalent(bounds)


@pytest.fixture(scope="session")
def synthetic_cost():
    return synthetic_quadratic_cost()


@pytest.fixture(scope="session")
def additive_cost():
    return additive_quadratic_cost()


@pytest.fixture(scope="session")
def survival(bounds):
    return synthetic_power_survival(bounds, exponent=8)


def closed_form_threshold(gamma, mu, bounds):
    """Independent root of (1-theta)^2 (1.2-mu)^2 = gamma, with clamping.

    Returns None when the root exceeds theta_hi (nobody joins).
    """
    root = 1.0 - gamma**0.5 / (1.2 - mu)
    if root > bounds.theta_hi:
        return None
    return max(root, bounds.theta_lo)


def power_survival_value(theta, bounds, exponent=8):
    u = (theta - bounds.theta_lo) / (bounds.theta_hi - bounds.theta_lo)
    return 1.0 - min(max(u, 0.0), 1.0) ** exponent
