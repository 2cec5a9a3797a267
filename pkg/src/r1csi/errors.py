"""Exception types shared across the estimator pipeline."""


class EstimationError(RuntimeError):
    """An estimator could not produce a result for this realization.

    Raised for data-dependent failures (unresolved paths, rank deficits).
    The Monte Carlo harness records these as failed trials instead of
    aborting a sweep. Programming errors keep raising ValueError/TypeError.
    """


class ChannelGenerationError(RuntimeError):
    """Rejection sampling could not satisfy the AoA gap condition.

    Indicates an over-constrained (P, L) combination, not a transient
    failure: retrying with the same configuration will not help.
    """
