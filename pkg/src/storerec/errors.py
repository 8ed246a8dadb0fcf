"""Exception hierarchy shared across the package.

The CLI maps ``ValidationError`` to exit code 2 and ``DivergenceError`` to 3.
"""


class StoreError(Exception):
    """Base class for every error raised by storerec."""


class ValidationError(StoreError, ValueError):
    pass


class DivergenceError(StoreError):
    pass
