"""Exception hierarchy shared by every module."""


class LSPTError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(LSPTError, ValueError):
    pass


class ContractError(LSPTError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(LSPTError, ArithmeticError):
    pass


class LabelError(LSPTError, ValueError):
    pass


class EmptyInputError(ContractError):
    pass


class GraphError(LSPTError, RuntimeError):
    """Misuse of a differentiation graph (second backward, foreign nodes)."""


class ConfigError(LSPTError, ValueError):
    pass


class FormatError(LSPTError, ValueError):
    """A binary file has a bad magic, version or layout."""


class NumericAbort(LSPTError, RuntimeError):
    """Training produced a non-finite loss."""


class FileIOError(LSPTError, OSError):
    """A file could not be read or written (missing, truncated, unwritable)."""
