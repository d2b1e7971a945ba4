"""Exception hierarchy. CLI exit codes are keyed off these classes."""


class HmtError(Exception):
    pass


class ConfigError(HmtError):
    pass


class DataError(HmtError):
    pass


class FormatError(HmtError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(HmtError):
    pass


class DimensionError(HmtError, ValueError):
    pass


class CapacityError(HmtError, ValueError):
    pass


class NumericDomainError(HmtError, ArithmeticError):
    pass


class StabilityError(HmtError, ArithmeticError):
    pass
