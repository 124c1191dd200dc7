"""Exception families shared across the package.

The CLI maps each family to its own exit code, so raising the right class
matters: ConfigError -> 1, DataError -> 2, FormatError -> 3,
ContractError -> 4.
"""


class BrainAgeError(Exception):
    """Base class for all package errors."""


class ConfigError(BrainAgeError):
    """Invalid configuration value, unknown key, or bad hyperparameter."""


class DataError(BrainAgeError):
    """Bad or missing data: empty cohorts, manifest problems, degenerate inputs."""


class FormatError(BrainAgeError):
    """On-disk format violation: bad magic, truncated payload, unsupported variant."""


class ContractError(BrainAgeError):
    """A caller broke an API contract (wrong stage tag, empty modality map, ...)."""


class TrainingOrderError(ContractError):
    """A training phase was given a checkpoint from the wrong phase."""
