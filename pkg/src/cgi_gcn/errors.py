class CGIError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(CGIError, ValueError):
    pass


class GraphFormatError(CGIError, ValueError):
    """Malformed input file; the message names the file and line."""


class GenerationError(CGIError):
    pass


class NumericalError(CGIError, FloatingPointError):
    pass


class TrainingError(CGIError):
    pass


class DatasetSparsityError(CGIError):
    """Too few usable nodes to fit a choice model; callers should fall back to the graph prediction."""


class SolverError(CGIError):
    pass
