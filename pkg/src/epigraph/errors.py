"""Exception types shared across the package.

Every error raised on a user-facing contract violation is a subclass of
:class:`EpigraphError`, so callers can catch one base type.  Numerical
failures (CFL violations, non-finite updates) are kept separate from
configuration problems because the command line maps them to different
exit codes.
"""

from __future__ import annotations


class EpigraphError(Exception):
    """Base class for all package errors."""


# --- problem construction -------------------------------------------------

class MissingField(EpigraphError):
    """A required problem field was not supplied."""


class NonpositiveHorizon(EpigraphError):
    """The time horizon must be strictly positive."""


class EmptyControlGrid(EpigraphError):
    """The control set must contain at least one point."""


class NegativeWeight(EpigraphError):
    """Jump intensities (atom weights) must be strictly positive."""


class NonFiniteCoefficient(EpigraphError):
    """A coefficient callable returned NaN or infinity."""


class NegativeDistance(EpigraphError):
    """A distance callable returned a negative value."""


# --- simulation -----------------------------------------------------------

class StepTooLarge(EpigraphError):
    """The requested simulation step exceeds the remaining horizon."""


class NonFiniteState(EpigraphError):
    """A simulated path left the finite range of floats."""


# --- Hamiltonian evaluation -----------------------------------------------

class NegativeMargin(EpigraphError):
    """The coupling scale is only defined for nonnegative margins."""


class ShiftOutOfDomain(EpigraphError):
    """A jump-shifted evaluation point left the grid hull with clamping off."""


# --- solving --------------------------------------------------------------

class DegenerateGrid(EpigraphError):
    """Grid axes must have at least three nodes and positive spacing."""


class CFLViolation(EpigraphError):
    """The time step exceeds the stable explicit bound."""


class IncompatibleGrids(EpigraphError):
    """Boundary fields were solved on a grid that does not match."""


class NonFiniteUpdate(EpigraphError):
    """A sweep step produced NaN or infinity."""


class UnsolvedField(EpigraphError):
    """An operation needed a solved field but received something else."""


class Unreachable(EpigraphError):
    """No margin on the grid brings the shortfall below threshold."""


# --- configuration --------------------------------------------------------

class ParseError(EpigraphError):
    """Configuration text is not valid JSON (position annotated)."""


class UnknownKey(EpigraphError):
    """Configuration contains an unrecognized key (suggestion attached)."""


class SchemaViolation(EpigraphError):
    """Configuration value has the wrong type or an out-of-range value."""


# --- orchestration ----------------------------------------------------------

class Interrupted(EpigraphError):
    """A solve was stopped by a signal after checkpointing partial results."""
