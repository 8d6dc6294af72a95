"""Exception hierarchy shared by all pipeline stages."""


class VesselStereoError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(VesselStereoError, ValueError):
    """An argument or configuration value is out of its valid range."""


class SwcParseError(VesselStereoError, ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class TreeError(VesselStereoError):
    """A tree cannot be built or violates its structural invariants."""


class RankError(VesselStereoError, ValueError):
    """Point configuration is degenerate for the requested estimate."""


class ConditioningError(VesselStereoError, ArithmeticError):
    """Kernel matrix is not numerically positive definite."""


class MatchError(VesselStereoError):
    """Stereo matching produced no usable correspondences."""


class GeometryError(VesselStereoError, ValueError):
    """Invalid stereo geometry or a point outside the physical range."""


class ConfigError(VesselStereoError, ValueError):
    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class StageError(VesselStereoError):
    """Wraps a failure inside a named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
