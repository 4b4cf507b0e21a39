class EstimationError(RuntimeError):
    """An estimation stage cannot produce a valid result for the given data."""


class SupportError(EstimationError):
    """Treated and untreated propensity scores do not overlap enough."""
