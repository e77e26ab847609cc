"""Shared exception types."""


class LmlabError(Exception):
    """Base class for package errors."""


class ContractError(LmlabError):
    """A caller violated an operation's precondition (e.g. shape mismatch)."""


class DataError(LmlabError):
    """Input data is missing, malformed, or inconsistent."""


class ParseError(DataError):
    """A file failed to parse; carries the offending 1-based line number."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")
