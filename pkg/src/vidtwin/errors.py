"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class VidTwinError(Exception):
    exit_code = 1


class ConfigError(VidTwinError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    pass


class StatsError(ConfigError):
    pass


class ScheduleError(ConfigError):
    pass


class ContractError(VidTwinError, RuntimeError):
    exit_code = 2


class IngestionError(VidTwinError, OSError):
    exit_code = 3


class FormatError(VidTwinError, ValueError):
    exit_code = 3


class NumericError(VidTwinError, ArithmeticError):
    exit_code = 4


class RangeError(NumericError, ValueError):
    pass


class DomainError(NumericError, ValueError):
    pass
