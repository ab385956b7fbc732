"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: config=2, data=3, numeric=4, io=5.
"""


class SeqDistillError(Exception):
    """Base class for all package errors."""


class ConfigError(SeqDistillError):
    """Bad configuration: unknown key, wrong type, invalid value."""


class DataError(SeqDistillError):
    """Bad or degenerate input data (parse failures, vanished datasets)."""


class NumericError(SeqDistillError):
    """Numeric failure: non-finite values, divergence."""


class ContractViolation(SeqDistillError):
    """A caller broke an API precondition; indicates a programming error."""


class DeterminismError(SeqDistillError):
    """Two runs that must agree bit-for-bit did not."""


class IntegrityError(SeqDistillError):
    """Checkpoint content does not match its manifest hash."""


class MigrationError(SeqDistillError):
    """Checkpoint format version is not supported."""


class DependencyError(SeqDistillError):
    """Checkpoint refers to a dependency with a different content hash."""
