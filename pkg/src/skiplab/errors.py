class SkiplabError(Exception):
    pass


class DimensionError(SkiplabError, ValueError):
    pass


class ParameterError(SkiplabError, ValueError):
    pass


class InputError(SkiplabError, ValueError):
    pass


class PreconditionError(SkiplabError):
    """A bound was requested outside the depth gate under which it is proved."""


class ValidationError(SkiplabError, ValueError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DivergenceError(SkiplabError):
    """Training aborted because the risk exceeded the divergence threshold."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory
