"""Exception hierarchy shared by every gatedvol module."""


class GatedVolError(Exception):
    """Base class for all library errors."""

    exit_code = 2


class DomainError(GatedVolError, ValueError):
    """An argument lies outside the domain of the operation."""


class ArbitrageViolationError(DomainError):
    """A price lies outside the static no-arbitrage band."""


class ConvergenceError(GatedVolError, ArithmeticError):
    """An iterative solver failed to converge."""

    exit_code = 3


class DivergenceError(ConvergenceError):
    """Training produced a non-finite loss.

    Attributes:
        step: iteration at which the loss stopped being finite.
        components: the six loss components at that step.
    """

    def __init__(self, step, components):
        self.step = step
        self.components = tuple(float(c) for c in components)
        super().__init__(
            f"non-finite loss at step {step}; components="
            + ", ".join(f"l{i}={c!r}" for i, c in enumerate(self.components))
        )


class ParseError(GatedVolError, ValueError):
    """A model or config document is malformed."""


class FormatError(GatedVolError, ValueError):
    """A delimited input file has the wrong layout."""


class InsufficientDataError(GatedVolError, ValueError):
    """Too few observations to calibrate reliably."""
