"""Exception hierarchy shared by every module."""


class ParaformerError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ParaformerError, ValueError):
    pass


class ParameterError(ParaformerError, ValueError):
    pass


class VocabError(ParaformerError, IndexError):
    pass


class ContractError(ParaformerError, RuntimeError):
    pass


class ConsistencyError(ParaformerError, RuntimeError):
    pass


class ConfigError(ParaformerError, ValueError):
    pass


class DataError(ParaformerError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, line: int, reason: str, path=None):
        self.line = line
        self.reason = reason
        self.path = path
        where = f"{path}:{line}" if path is not None else f"line {line}"
        super().__init__(f"{where}: {reason}")


class LengthError(ParaformerError, ValueError):
    pass


class FormatError(ParaformerError, ValueError):
    pass
