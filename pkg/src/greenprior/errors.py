"""Exception hierarchy.

Every error raised by the package derives from :class:`GreenPriorError`.
The three intermediate classes map onto CLI exit codes (2 config, 3 data,
4 numerical failure).
"""

from __future__ import annotations


class GreenPriorError(Exception):
    exit_code = 1

    def __init__(self, message: str, *, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    @property
    def kind(self) -> str:
        return type(self).__name__


class ConfigError(GreenPriorError):
    exit_code = 2


class DataError(GreenPriorError):
    exit_code = 3


class NumericalError(GreenPriorError):
    exit_code = 4


# raster_core
class UnknownAttribute(DataError):
    pass


class DuplicateLayerName(DataError):
    pass


class MisalignedGrids(DataError):
    pass


class EmptyInput(DataError):
    pass


# geostat
class TooFewStations(DataError):
    pass


class NoComparablePoints(DataError):
    pass


class SingularSystem(NumericalError):
    pass


# dataset
class EmptyTable(DataError):
    pass


class TooFewRows(DataError):
    pass


class UnknownFeature(DataError):
    pass


# ml
class SingleClassTraining(DataError):
    pass


class WrongModelKind(ConfigError):
    pass


class LengthMismatch(DataError):
    pass


class ObjectiveFailure(NumericalError):
    pass


# io
class ParseError(DataError):
    def __init__(self, message: str, *, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class DimensionMismatch(DataError):
    pass
