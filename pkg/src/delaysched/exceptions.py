"""Exception hierarchy shared across the package."""


class DelaySchedError(Exception):
    """Base class for every error raised by this package."""


class InvalidInput(DelaySchedError, ValueError):
    """Malformed model, configuration or policy."""


class NonStochasticRow(InvalidInput):
    pass


class NotErgodic(InvalidInput):
    pass


class PowersNotDecreasing(InvalidInput):
    pass


class NonPositivePower(InvalidInput):
    pass


class Infeasible(DelaySchedError):
    """The power budget cannot carry the offered load."""


class InfeasibleBudget(Infeasible):
    pass


class TooLarge(DelaySchedError):
    """A brute-force search would exceed its size guard."""


class NumericalFailure(DelaySchedError):
    pass


class SingularTransition(NumericalFailure):
    pass


class NoConvergence(NumericalFailure):
    pass


class ReducibleClosedLoop(NumericalFailure):
    pass


class StructureViolation(NumericalFailure):
    """A computed value function or policy lost its proven monotone structure."""


class BracketViolation(NumericalFailure):
    pass
