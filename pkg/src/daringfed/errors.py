"""Exception types shared across the package."""


class MechanismError(Exception):
    """Base class for all domain errors raised by this package."""


class ConfigError(MechanismError):
    """Inconsistent or out-of-contract configuration."""


class InvalidDomain(MechanismError):
    """An argument fell outside its documented domain box."""


class DegenerateSplit(MechanismError):
    """A two-point split collapsed to a single point away from the target mean."""


class ZeroMassAtom(MechanismError):
    """A conditional signal formula would divide by a zero prior mass."""


class PlausibilityViolation(MechanismError):
    """A candidate scheme's mean posterior does not match the prior mean."""


class SchemeInvariantError(MechanismError):
    """A constructed signal scheme failed one of its validity identities."""


class Infeasible(MechanismError):
    """No (reward, scheme) pair satisfies the active constraints."""


class Unbracketable(MechanismError):
    """No posterior-mean pair can pin the threshold onto adjacent grid points."""


class GridExhausted(MechanismError):
    """The reward grid cannot induce the requested threshold."""


class UnknownBucket(MechanismError):
    """A threshold value does not lie on the estimator's grid."""


class DimensionMismatch(MechanismError):
    """Vector operands have incompatible shapes."""
