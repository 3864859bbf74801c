"""Exception hierarchy shared by every hctc module.

The CLI maps any :class:`HctcError` to exit code 2 and prints the ``code``
attribute as a machine-parsable reason.
"""


class HctcError(Exception):
    code = "error"


class ContractError(HctcError, ValueError):
    code = "contract"


class ConfigError(HctcError, ValueError):
    code = "config"


class InfeasibleTargetError(HctcError):
    """Target cannot be emitted in the available number of frames."""

    code = "infeasible-target"


class UnknownSymbolError(HctcError, KeyError):
    code = "unknown-symbol"

    def __init__(self, symbol, context=""):
        self.symbol = symbol
        msg = f"unknown symbol {symbol!r}"
        if context:
            msg += f" in {context!r}"
        super().__init__(msg)

    def __str__(self):
        return self.args[0]


class FormatError(HctcError):
    """Malformed or truncated file."""

    code = "format"

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class AlignmentError(HctcError):
    """Reference and hypothesis sets do not cover the same utterances."""

    code = "alignment"

    def __init__(self, missing, extra):
        self.missing = sorted(missing)
        self.extra = sorted(extra)
        super().__init__(
            f"utterance ids differ: missing from hyp={_preview(self.missing)} "
            f"extra in hyp={_preview(self.extra)}"
        )


def _preview(ids, limit=5):
    if len(ids) <= limit:
        return str(ids)
    return f"{ids[:limit]} (+{len(ids) - limit} more)"


class EmptyBatchError(HctcError):
    code = "empty-batch"


class OracleInvalidError(HctcError):
    code = "oracle-invalid"


class OracleSizeError(HctcError):
    code = "oracle-size"
