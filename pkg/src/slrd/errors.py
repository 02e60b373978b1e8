"""Exception hierarchy shared across the toolkit.

DataError covers everything wrong with inputs (files, config, shapes);
NumericalError covers failures of the math itself (divergence, loss of
positive definiteness, non-finite values). The CLI maps these onto
distinct exit codes.
"""


class SlrdError(Exception):
    pass


class DataError(SlrdError):
    pass


class FormatError(DataError):
    """Malformed SLRT container (bad magic, truncation, version)."""


class ConfigError(DataError):
    """Unparseable or invariant-violating run configuration."""


class NumericalError(SlrdError):
    pass
