"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, finiteness, range)."""


class ConfigurationError(ValueError):
    """An incompatible or incomplete combination of run components."""


class LikelihoodBoundError(RuntimeError):
    """A pointwise likelihood exceeded its declared upper bound."""
