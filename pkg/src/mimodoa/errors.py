"""Exception hierarchy.

``DataError`` subclasses map to CLI exit code 2 and ``DivergenceError`` to 3.
"""


class DoaError(Exception):
    pass


class DataError(DoaError):
    pass


class InputError(DataError, ValueError):
    """Argument violates an operation's precondition."""


class WavIOError(DataError, OSError):
    pass


class PlacementError(InputError):
    """No feasible source position along the requested direction."""


class GenerationError(DataError):
    pass


class MissingArtifactError(DataError, FileNotFoundError):
    def __init__(self, path, stage):
        self.path = path
        self.stage = stage
        super().__init__(f"missing {path}; run the '{stage}' stage first")


class DivergenceError(DoaError, FloatingPointError):
    pass
