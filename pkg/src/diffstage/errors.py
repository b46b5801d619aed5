"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes (data 2, numeric 3, provider 4),
so library code should raise the most specific class that applies.
"""


class DiffstageError(Exception):
    """Base class for all package errors."""


class DataError(DiffstageError):
    """Malformed or inconsistent input data (files, matrices, cohorts)."""


class NumericError(DiffstageError):
    """Numerical failure: instability, undefined metric, divergence."""


class ProviderError(DiffstageError):
    """Text-generation provider failure (network, HTTP, offline violation).

    ``partial`` optionally carries results collected before the failure.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ParseError(ProviderError):
    """Provider response text that does not follow the documented grammar.

    ``raw_ref`` points at the cache entry holding the offending raw text.
    """

    def __init__(self, message, raw_ref=None):
        super().__init__(message)
        self.raw_ref = raw_ref
