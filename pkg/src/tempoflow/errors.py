"""Exception classes shared across tempoflow.

Exit codes used by the command-line tool: 2 config, 3 data, 4 numerical.
"""


class TempoflowError(Exception):
    exit_code = 1
    kind = "error"


class ContractError(TempoflowError, ValueError):
    """A caller broke an operation's precondition."""

    exit_code = 2
    kind = "contract"


class ConfigError(TempoflowError):
    exit_code = 2
    kind = "config"


class DataError(TempoflowError):
    exit_code = 3
    kind = "data"


class FormatError(DataError):
    """Base for malformed interchange files."""

    kind = "format"


class BadMagicError(FormatError):
    kind = "bad_magic"


class TruncatedError(FormatError):
    kind = "truncated"


class NonFiniteError(FormatError):
    kind = "non_finite"


class UnsupportedVariantError(FormatError):
    kind = "unsupported_variant"


class HeaderError(FormatError):
    kind = "bad_header"


class NumericalError(TempoflowError):
    exit_code = 4
    kind = "numerical"
