"""Exception hierarchy shared by all gridfit modules."""


class GridfitError(Exception):
    """Base class for every error raised by gridfit."""


class SingularMatrix(GridfitError):
    pass


class IndexOutOfRange(GridfitError, IndexError):
    pass


class FeederError(GridfitError, ValueError):
    """Malformed feeder description (topology, loads, file contents)."""


class MissingReading(GridfitError, KeyError):
    pass


class UnknownConnection(GridfitError, ValueError):
    pass


class SolverError(GridfitError):
    """Base for failures of the fixed-point power-flow solver.

    ``t`` carries the offending time index when the failure happened inside a
    batched solve.
    """

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t})")
        self.t = t


class NotConverged(SolverError):
    pass


class Diverged(SolverError):
    pass


class ZeroVoltage(SolverError):
    pass


class ZeroMagnitude(GridfitError):
    pass


class ZIterationDiverged(SolverError):
    pass


class StepUnderflow(GridfitError):
    pass


class NoProgress(GridfitError):
    pass


class OracleNotConverged(SolverError):
    pass


class ZeroCurrent(GridfitError):
    pass


class InvalidCut(GridfitError, ValueError):
    pass


class MissingQuasiSourceData(GridfitError, KeyError):
    pass


class OwnershipConflict(GridfitError):
    pass


class ZeroTruth(GridfitError, ValueError):
    pass


class DegenerateInitial(GridfitError, ValueError):
    pass
