"""Exception hierarchy shared by all modules."""


class TdoaFlowError(Exception):
    """Base class for every error raised by this package."""


class InvalidParam(TdoaFlowError, ValueError):
    pass


class DegenerateGeometry(TdoaFlowError):
    """A position coincides with a receiver, so the TDOA gradient is undefined."""


class SingularMatrix(TdoaFlowError):
    pass


class NonPositiveDefinite(TdoaFlowError):
    pass


class NonFiniteState(TdoaFlowError):
    pass


class InvalidFlowKind(TdoaFlowError):
    pass


class FlowStiffness(TdoaFlowError):
    """det(I + dlambda * A) <= 0 for some pseudo-time step."""


class EmptyKernel(TdoaFlowError):
    pass


class EmptyIntersection(TdoaFlowError):
    """The measured hyperboloid does not intersect the region of interest."""


class ZeroMass(TdoaFlowError):
    pass


class ConfigError(TdoaFlowError):
    pass


class ParseError(ConfigError):
    pass


class ValidationError(ConfigError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
