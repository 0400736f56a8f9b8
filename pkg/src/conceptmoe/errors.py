"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or arguments."""


class CapacityError(ValueError):
    """A request exceeds what the generator can supply."""


class RealizationError(KeyError):
    """A concept symbol has no surface form in a language."""


class ContextError(ValueError):
    """Sequence longer than the model's context window."""


class StateError(RuntimeError):
    """Operation requires a training state that has not been reached."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt or incompatible."""


class DataError(ValueError):
    """Datasets are inconsistent with each other."""
