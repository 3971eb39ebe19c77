class WeightFlowError(Exception):
    """Root of every error raised by weightflow."""

    exit_code = 2


class InputError(WeightFlowError, ValueError):
    """The input violates a documented precondition."""

    exit_code = 1


class ComputationError(WeightFlowError, RuntimeError):
    """A computation on valid input could not be completed."""

    exit_code = 2


# input errors
class NotALattice(InputError):
    pass


class NoBounds(InputError):
    pass


class NotModular(InputError):
    pass


class NotComparable(InputError):
    pass


class EmptyInterval(InputError):
    pass


class InvalidGraph(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class InvalidPolarization(InputError):
    pass


class NotParacomplemented(InputError):
    pass


# computation errors
class TooLarge(ComputationError):
    pass


class NonConvergence(ComputationError):
    pass


class NoStrictCertificate(ComputationError):
    pass


class NotCentral(ComputationError):
    pass


class NotHarmonic(ComputationError):
    pass


class NotSemistable(ComputationError):
    pass


class SingularMetric(ComputationError):
    pass


class StepFailure(ComputationError):
    pass


class PositivityLost(ComputationError):
    pass


class DepthExceeded(ComputationError):
    pass


class InsufficientRange(ComputationError):
    pass
