"""Exception taxonomy shared by the whole engine."""


class EngineError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EngineError):
    """Tensor extents are invalid or inconsistent for the requested op."""


class BroadcastError(ShapeError):
    """Two shapes cannot be broadcast together; names the offending dim."""


class ContractError(EngineError):
    """An operation was called outside its documented contract."""


class StateError(EngineError):
    """An operation was requested in an incompatible model/layer state."""


class ConfigError(EngineError):
    """A model/topology/benchmark configuration is invalid."""


class FormatError(EngineError):
    """A serialized file is malformed (bad magic, truncation, bad refs)."""


class DataError(EngineError):
    """Dataset contents violate the declared task (e.g. label range)."""


class DegenerateInputError(EngineError):
    """An input is statistically degenerate (zero variance, n too small)."""


class TrainingDiverged(EngineError):
    """Training produced non-finite values; carries diagnostics."""
