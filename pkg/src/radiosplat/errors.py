"""Exception types shared across the package.

The CLI maps these onto exit codes: schema/format problems are file errors
(exit 2), invariant violations are validation errors (exit 3), and
numeric/feasibility failures are exit 4.
"""


class RadiosplatError(Exception):
    """Base class for all package errors."""


class SchemaError(RadiosplatError):
    """A file could not be parsed against its documented schema."""


class FormatError(RadiosplatError):
    """A dataset directory or data file violates its documented format."""


class ValidationError(RadiosplatError):
    """A constructed object violates one of its invariants."""


class FeasibilityError(RadiosplatError):
    """No feasible configuration could be produced (box/spacing constraints)."""


class NumericError(RadiosplatError):
    """A numeric precondition failed (non-PD covariance, degenerate projection)."""
