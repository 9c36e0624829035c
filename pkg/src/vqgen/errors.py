"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed or contract-violating input data.

    The command line maps this (and I/O failures) to exit code 2, as
    opposed to usage errors (exit code 1).
    """


class CoverageError(DataError):
    """No tokens of a sequence are covered by an embedding table."""
