"""Exception hierarchy shared across the package."""


class Path24Error(Exception):
    """Base class for all package errors."""


class IngestionError(Path24Error):
    """Dataset tree or manifest could not be ingested."""


class SplitError(Path24Error):
    pass


class PatchLoadError(Path24Error):
    """A patch file could not be decoded or has unexpected dimensions."""


class RegistryError(Path24Error, KeyError):
    pass


class WeightLoadError(Path24Error):
    pass


class CheckpointError(Path24Error):
    """Checkpoint is missing, corrupt, or does not match the requested config."""


class CheckpointMismatchError(CheckpointError):
    pass


class ShapeError(Path24Error, ValueError):
    pass


class TrainingError(Path24Error):
    pass


class EvaluationError(Path24Error):
    pass


class ConfigError(Path24Error):
    """Run configuration is invalid; ``problems`` lists every offending key."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
