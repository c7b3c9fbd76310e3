"""Exception types raised by the solvers."""


class AnticipatingMVError(Exception):
    """Base class for all library errors."""


class SampleCountMismatch(AnticipatingMVError, ValueError):
    pass


class NonFiniteError(AnticipatingMVError, FloatingPointError):
    pass


class GridError(AnticipatingMVError, ValueError):
    pass


class PicardDivergence(AnticipatingMVError, RuntimeError):
    pass


class MaxIterationsReached(AnticipatingMVError, RuntimeError):
    pass


class UnknownProblem(AnticipatingMVError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0])


class ConfigError(AnticipatingMVError, ValueError):
    pass
