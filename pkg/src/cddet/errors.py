"""Exception hierarchy shared across the engine."""


class EngineError(Exception):
    """Base class for all engine failures."""


class DimensionError(EngineError):
    """Operand shapes do not satisfy an operation's contract."""


class DomainError(EngineError):
    """Input outside the mathematical domain of an operation."""


class DegenerateInputError(EngineError):
    """Input is degenerate (zero norm, empty score mass)."""


class ContractError(EngineError):
    """A caller violated a documented precondition."""


class ProtocolError(EngineError):
    """The incremental-session protocol was violated."""


class ConfigError(EngineError):
    """Invalid configuration or profile combination."""


class ParseError(EngineError):
    """Malformed persisted artifact; carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericsError(EngineError):
    """A tensor picked up non-finite entries."""
