"""Exception hierarchy shared across the package."""


class MeshflowError(Exception):
    """Base class for all errors raised by this package."""


class MeshFormatError(MeshflowError):
    """A mesh file could not be parsed (carries line/offset context)."""


class ValidationError(MeshflowError):
    """Input data violates a structural invariant."""


class ParameterError(MeshflowError):
    """A numeric parameter is outside its admissible range."""


class ConnectivityError(MeshflowError):
    """Mesh connectivity is insufficient for the requested operation."""


class DegenerateNormalError(MeshflowError):
    """A vertex has no incident face with usable area."""


class OptimizationError(MeshflowError):
    """An optimization loop produced a non-finite objective."""


class NumericalError(MeshflowError):
    """A numerical routine encountered non-finite intermediate values."""


class StateError(MeshflowError):
    """An object is missing state required by the requested operation."""


class UndefinedMetricError(MeshflowError):
    """A metric is undefined for the given inputs (e.g. two empty sets)."""
