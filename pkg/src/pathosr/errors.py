"""Exception types shared across the package and mapped to CLI exit codes."""


class UsageError(Exception):
    """Bad flags, malformed config keys, or otherwise invalid invocations."""


class DataError(Exception):
    """Missing/undecodable inputs, empty splits, or inconsistent manifests."""


class NumericalDivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss; carries a dump path."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
