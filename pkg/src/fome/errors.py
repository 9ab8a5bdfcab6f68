"""Exception hierarchy shared by all fome modules."""


class FomeError(Exception):
    """Base class for every error raised by this package."""


class FormatError(FomeError):
    """A file does not conform to its declared on-disk format."""


class DataError(FomeError):
    """Sample values violate a data contract (NaN/Inf, bad labels, ...)."""


class IoError(FomeError):
    """The underlying filesystem refused a read or write."""


class SpecError(FomeError):
    """A synthetic-signal specification is unrealizable."""


class ConfigError(FomeError):
    """A configuration value is out of its valid range."""


class EmptyError(FomeError):
    """An operation received too little signal to produce any output."""


class ShapeError(FomeError):
    """Tensor operands have incompatible shapes."""


class ContractError(FomeError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class CapacityError(FomeError):
    """Input exceeds a configured model capacity (e.g. too many patches)."""


class TrainError(FomeError):
    """Training failed mid-run (e.g. non-finite gradient)."""
