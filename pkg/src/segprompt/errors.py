"""Exception taxonomy shared by every module.

DimensionError and ConfigurationError mean the caller handed us something
malformed (CLI exit code 1). ContractError means a runtime guarantee was
violated mid-run, e.g. a data leak or a NaN loss (CLI exit code 2).
"""


class DimensionError(ValueError):
    """Shapes disagree. Messages always name both shapes."""


class ConfigurationError(ValueError):
    """Invalid configuration or unusable input data."""


class ContractError(RuntimeError):
    """A runtime invariant was violated: leak, NaN, missing gradient, overlap."""
