"""Exception types shared across the package."""


class PartFitError(Exception):
    """Base class for all partfit errors."""


class InvalidInputError(PartFitError):
    """An argument violates a documented precondition."""


class DegeneratePartError(PartFitError):
    """A point cloud collapses to a single location (zero scale)."""


class ContractViolationError(PartFitError):
    """Input breaks an interface contract (e.g. non-normalized cloud)."""


class DegenerateStatsError(PartFitError):
    """Distance statistics are unusable (d_l == d_h or not estimable)."""


class ConfigError(PartFitError):
    """Bad configuration value or unknown name."""


class ParseError(PartFitError):
    """Base class for file-format errors."""


class BadMagicError(ParseError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(ParseError):
    """File ends before the declared payload."""


class VersionMismatchError(ParseError):
    """File carries an unsupported format version."""


class NonFiniteError(PartFitError):
    """A computation produced NaN or Inf."""


class UsageError(PartFitError):
    """API misuse, e.g. backward before a forward recording."""


class TrainingDivergedError(PartFitError):
    """Training loss became non-finite."""


class NotFoundError(PartFitError):
    """Unknown identifier (session, part, object)."""


class UnknownClassError(PartFitError):
    """Payload references a class outside the model's label table."""


class StaleRevisionError(PartFitError):
    """Optimistic-concurrency conflict: revision does not match."""


class InvalidChoiceError(PartFitError):
    """Chosen part is not present in the most recent ranking."""
