"""Exception types shared across the package."""


class FlowsegError(Exception):
    """Base class for all package errors."""


class FormatError(FlowsegError):
    """Malformed file content (bad header, wrong magic, truncated payload)."""


class CapacityError(FlowsegError):
    """A value exceeds what the target format can represent."""


class ContractError(FlowsegError):
    """A caller violated an operation precondition or a type invariant."""


class ConfigError(FlowsegError):
    """A configuration value is out of range or geometrically impossible."""


class DataError(FlowsegError):
    """A dataset cannot supply what was requested (e.g. too few instances)."""


class MiningError(FlowsegError):
    """Positive mining found no candidate pixels; the pair must be skipped."""


class NumericError(FlowsegError):
    """A non-finite value appeared where finite math was required."""
