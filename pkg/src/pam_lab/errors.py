"""Exception types shared by all modules.

Each class carries the CLI exit code it maps to.
"""


class PamLabError(Exception):
    exit_code = 2


class ContractViolation(PamLabError, ValueError):
    """Bad input: out-of-range parameter, unnormalized profile, usage error."""
    exit_code = 1


class GridTooSmallError(ContractViolation):
    pass


class SampleSizeError(ContractViolation):
    pass


class NumericalError(PamLabError, ArithmeticError):
    """A computation ran but did not reach the requested accuracy."""
    exit_code = 2

    def __init__(self, msg, achieved=None):
        super().__init__(msg)
        self.achieved = achieved


class IterationLimitError(NumericalError):
    def __init__(self, msg, best=None):
        super().__init__(msg, achieved=best)
        self.best = best


class BlowUpError(NumericalError):
    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


class ResourceError(PamLabError):
    exit_code = 3
