"""Exception hierarchy shared by all thermophase modules."""


class ThermophaseError(Exception):
    """Base class for every error raised by the package."""


class ResolventDivergence(ThermophaseError):
    """Scalar Newton solve for the Yosida resolvent did not converge."""


class NonpositiveTemperature(ThermophaseError):
    """A temperature value at a node or quadrature point is not positive."""


class NegativeBoundarySource(ThermophaseError):
    """Boundary heat flux data h < 0 was supplied (h must be nonnegative)."""


class InvalidInitialData(ThermophaseError):
    """Initial data violate an admissibility condition."""


class NewtonDivergence(ThermophaseError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class ActiveSetCycling(ThermophaseError):
    """Primal-dual active set iteration exceeded its iteration budget."""


class LinearSolveFailure(ThermophaseError):
    pass


class PositivityLoss(ThermophaseError):
    """Converged temperature has a nonpositive node."""


class StepDivergence(ThermophaseError):
    def __init__(self, message, step=None, diagnostics=None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics or {}


class WindowMisaligned(ThermophaseError):
    pass


class NegativeTestFunction(ThermophaseError):
    pass


class InadmissibleTestField(ThermophaseError):
    pass


class SearchBoxTooSmall(ThermophaseError):
    """Grid-search minimizer sits on a box face that is not a constraint."""


class ConfigInvalid(ThermophaseError):
    """Configuration failed validation; ``errors`` lists every violation."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class ArchiveError(ThermophaseError):
    pass
