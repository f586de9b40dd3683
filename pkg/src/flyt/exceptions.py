"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericalError(FloatingPointError):
    """A non-finite value appeared inside a computation.

    ``stage`` names the part of the pipeline that produced it, ``step`` is the
    training step index when known.
    """

    def __init__(self, stage, message="non-finite value", step=None):
        self.stage = stage
        self.step = step
        where = stage if step is None else f"{stage} (step {step})"
        super().__init__(f"{message} in {where}")


class FormatError(ValueError):
    """A persisted file could not be parsed."""


class VersionError(FormatError):
    """A persisted file carries an unsupported format version."""
