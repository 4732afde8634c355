"""Persuasion-based signaling and bandit pricing for online federated
learning, plus a deterministic simulation harness around a toy model."""

from .errors import (
    ConfigError,
    DegenerateSplit,
    DimensionMismatch,
    GridExhausted,
    Infeasible,
    InvalidDomain,
    MechanismError,
    PlausibilityViolation,
    SchemeInvariantError,
    UnknownBucket,
    Unbracketable,
    ZeroMassAtom,
)
from .mechanism import (
    CommPrior,
    CostModel,
    MechanismChoice,
    ResourceBounds,
    SignalScheme,
    SurvivalModel,
    build_scheme,
    check_bayes_benefit,
    conditional_signals,
    full_pooling_scheme,
    full_revelation_scheme,
    make_participation_fn,
    participation_prob,
    server_cost,
    threshold,
    two_point_split,
)

__version__ = "0.1.0"
