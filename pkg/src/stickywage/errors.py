"""Exception types shared across the package.

The CLI maps these onto process exit codes, so the distinction between a
violated model assumption, an inadmissible state, and a plain usage error
matters: keep raising the most specific type available.
"""


class StickywageError(Exception):
    """Base class for all package-specific errors."""


class DomainError(StickywageError):
    """Arguments outside the mathematical domain of an operation.

    Examples: a grid that does not cover the delay window, a measure
    evaluated past its horizon, mismatched path/grid shapes.
    """


class AssumptionViolation(StickywageError):
    """A well-posedness condition of the model fails for the given inputs.

    ``condition`` is a short machine-readable tag; the message spells the
    violated inequality out with the offending numbers.
    """

    def __init__(self, condition: str, message: str):
        self.condition = condition
        super().__init__(message)


class AdmissibilityError(StickywageError):
    """State or control outside the admissible region (e.g. negative
    total wealth at the start, degenerate Hamiltonian, empty robust set)."""


class SimulationError(StickywageError):
    """Numerical failure during path generation (overflow, divergence of a
    fixed-point iteration, kernel total-variation bound exceeded)."""


class ConfigError(StickywageError):
    """Scenario file missing, unparsable, or structurally invalid."""
