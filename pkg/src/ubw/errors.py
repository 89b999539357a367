"""Exception hierarchy shared by every module.

All errors raised on purpose derive from :class:`UBWError` so callers (and the
CLI) can tell a contract violation from a genuine bug.
"""


class UBWError(Exception):
    """Base class for all structured errors raised by this package."""


class ShapeError(UBWError, ValueError):
    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(UBWError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class BackwardError(UBWError, RuntimeError):
    """Misuse of the autodiff engine (non-scalar loss, released graph, ...)."""


class HigherOrderError(BackwardError):
    """A second-order request was made on a first-order tape."""


class DivergenceError(UBWError, FloatingPointError):
    def __init__(self, message, epoch=None, batch=None, round_index=None):
        self.epoch = epoch
        self.batch = batch
        self.round_index = round_index
        where = []
        if round_index is not None:
            where.append(f"round {round_index}")
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if batch is not None:
            where.append(f"batch {batch}")
        if where:
            message = f"{message} at {', '.join(where)}"
        super().__init__(message)


class FormatError(UBWError, ValueError):
    """A file does not follow its binary/text format."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        if offset is not None:
            message = f"{message} (offset {offset})"
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class ConfigError(UBWError, ValueError):
    """Invalid configuration or parameter value."""


class DegenerateGradientError(UBWError, ArithmeticError):
    """A gradient used for normalisation has zero norm."""


class InsufficientSamplesError(UBWError):
    def __init__(self, needed, found):
        self.needed = needed
        self.found = found
        super().__init__(
            f"need {needed} correctly classified samples, found only {found}"
        )


class ProtocolError(UBWError):
    """A model oracle answered with a malformed probability vector."""


class UnsupportedArchError(UBWError, TypeError):
    """The requested operation does not apply to this architecture."""


class DigestError(UBWError):
    """A stored digest does not match the recomputed one."""
