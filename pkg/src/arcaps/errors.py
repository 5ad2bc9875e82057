"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters: configuration problems are usage errors, bad data files are data
errors, and numerical breakdowns (non-finite values, divergence) are
computation errors.
"""


class ArcapsError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ArcapsError):
    """A model/config/shape declaration is inconsistent or unsupported."""


class InputDataError(ArcapsError):
    """An input file or runtime argument is malformed or out of range."""


class ComputationError(ArcapsError):
    """A numerical computation produced non-finite or impossible results."""
