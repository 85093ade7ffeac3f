"""Exception hierarchy shared by all flare modules."""


class FlareError(Exception):
    """Base class for every error raised by flare."""


class InvalidNet(FlareError, ValueError):
    pass


class NonIntegerInterval(FlareError, ValueError):
    pass


class StateSpaceOverflow(FlareError, RuntimeError):
    def __init__(self, max_states):
        super().__init__(f"reachability graph exceeds max_states={max_states}")
        self.max_states = max_states


class EmptyTrace(FlareError, ValueError):
    pass


class UnknownTransition(FlareError, KeyError):
    pass


class DimensionMismatch(FlareError, ValueError):
    pass


class NotADistribution(FlareError, ValueError):
    pass


class InfeasibleSpec(FlareError, ValueError):
    pass


class BadObservationIndex(FlareError, IndexError):
    pass


class ZeroProbabilitySequence(FlareError, ValueError):
    pass


class InvalidHmm(FlareError, ValueError):
    pass


class OutOfRange(FlareError, ValueError):
    pass


class DegenerateRates(FlareError, ValueError):
    pass


class TooShort(FlareError, ValueError):
    pass


class LengthMismatch(FlareError, ValueError):
    pass


class MissingDiagnosis(FlareError, KeyError):
    pass


class InfeasibleTopology(FlareError, ValueError):
    pass
