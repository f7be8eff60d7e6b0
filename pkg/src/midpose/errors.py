"""Exception hierarchy shared by all midpose modules."""


class MidposeError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(MidposeError, ValueError):
    """Shapes, dimensions or settings that do not fit together."""


class NonFiniteError(MidposeError, FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class GradCheckError(MidposeError, AssertionError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class GeometryError(MidposeError):
    pass


class BehindCameraError(GeometryError):
    def __init__(self, index, depth):
        super().__init__(f"point {index} has non-positive depth {depth:.6g}")
        self.index = index
        self.depth = depth


class DegenerateConfigurationError(GeometryError):
    pass


class PnPConvergenceError(GeometryError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (reprojection RMS {residual:.3g} px)")
        self.residual = residual


class RenderError(MidposeError):
    pass


class FormatError(MidposeError, ValueError):
    """Malformed file content."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class CorruptFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class MissingFileError(MidposeError, FileNotFoundError):
    pass
