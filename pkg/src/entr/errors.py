"""Exception hierarchy shared by every entr module."""


class EntrError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EntrError, ValueError):
    """Tensor shapes do not conform to what an operation needs."""


class ParameterError(EntrError, ValueError):
    """A scalar argument is outside its allowed range."""


class StateError(EntrError, RuntimeError):
    """An object is used in a state that does not support the call."""


class GraphError(StateError):
    """Reverse-mode differentiation was requested on a consumed or missing graph."""


class ConfigError(EntrError, ValueError):
    """A model, regime or experiment configuration is invalid."""


class IngestionError(EntrError):
    """An image folder could not be turned into a dataset."""


class SplitError(EntrError, ValueError):
    """A dataset cannot be split as requested."""


class SpecError(EntrError, ValueError):
    """A synthetic dataset spec fails validation."""


class FinderError(EntrError, RuntimeError):
    """The learning-rate sweep diverged immediately."""


class PretrainError(EntrError, RuntimeError):
    """Source-task pre-training did not clear its accuracy floor."""


class RunError(EntrError, RuntimeError):
    """A training run hit a non-finite loss or another fatal condition."""


class ReportError(EntrError, ValueError):
    """Run records cannot be combined into a report."""
