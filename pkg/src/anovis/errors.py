"""Exception types shared across the package.

The CLI maps these to exit codes: configuration/validation problems exit 2,
training divergence exits 3.
"""


class ConfigurationError(Exception):
    """Bad paths, malformed config files, missing required inputs."""


class DataValidationError(Exception):
    """Inputs that violate an operation's preconditions."""


class TrainingDiverged(Exception):
    """Loss became non-finite; carries the offending batch ids."""

    def __init__(self, message, batch_ids=None, epoch=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids or [])
        self.epoch = epoch
