"""Exception types raised across the package."""


class MetaImagerError(Exception):
    """Base class for all package errors."""


class DegenerateGeometryError(MetaImagerError, ValueError):
    """A distance that enters a Green's function or feed kernel is zero."""


class ResonanceSingularityError(MetaImagerError, ArithmeticError):
    """The coupled-dipole system is singular or too ill-conditioned to trust."""


class PackingInfeasibleError(MetaImagerError, RuntimeError):
    """Rejection sampling could not place every meta-atom."""


class ShapeError(MetaImagerError, ValueError):
    """Grid or array shapes do not agree."""


class CalibrationError(MetaImagerError, ValueError):
    """Calibration or noise estimation has no usable signal."""


class NumericOverflowError(MetaImagerError, ArithmeticError):
    """A forward pass produced a non-finite intermediate."""


class TrainingDivergedError(MetaImagerError, RuntimeError):
    """The training loss became non-finite."""


class ParseError(MetaImagerError, ValueError):
    """A data file (IDX, CSV, checkpoint, manifest) is malformed."""


class DegeneratePatternError(MetaImagerError, ValueError):
    """An illumination pattern with zero norm cannot enter an overlap."""
