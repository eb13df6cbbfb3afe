"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Everything else is a plain failure (exit 1).
"""


class EsnetError(Exception):
    """Base class for all package errors."""


class InvalidInputError(EsnetError):
    """An argument violates a documented precondition (bad shape, zero norm, ...)."""


class ContractViolationError(EsnetError):
    """An internal contract between pipeline stages was broken upstream."""


class SamplerContractError(ContractViolationError):
    """A batch does not satisfy the J distinct identities x K instances contract."""


class TapResolutionError(EsnetError):
    """A layer-tap name does not resolve to exactly one layer of the model."""


class ConfigError(EsnetError):
    """Configuration file or override is invalid."""


class DataError(EsnetError):
    """Dataset root missing, malformed, or infeasible for the protocol."""


class NumericError(EsnetError):
    """A numeric failure (non-finite loss, failed gradient check) occurred."""
