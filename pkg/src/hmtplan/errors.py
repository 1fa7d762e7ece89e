"""Exception hierarchy shared by every planning pass."""


class HmtplanError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(HmtplanError):
    """A graph violates a structural invariant (cycle, dangling tensor, ...)."""


class SchemaError(HmtplanError):
    """An input document does not validate against its schema."""


class VariantError(HmtplanError):
    """A compression config does not fit the graph it is applied to."""


class OffloadError(HmtplanError):
    """Partitioning or offload search cannot proceed."""


class PlanError(HmtplanError):
    """A deployment plan is inconsistent with its graph or fleet."""


class CalibrationError(HmtplanError):
    """Not enough (or degenerate) measurements to fit cost coefficients."""
