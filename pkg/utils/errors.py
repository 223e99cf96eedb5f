"""
Exception hierarchy shared by every service.

All errors derive from HolonomyError so entry points (CLI, HTTP router) can map
them to a single exit code / status without catching programming errors.
"""


class HolonomyError(Exception):
    """Base class for domain errors."""


class ConfigError(HolonomyError, ValueError):
    """Experiment configuration is invalid or incomplete."""


class DistanceTooLarge(HolonomyError, ValueError):
    """Two points are too far apart for a unique minimal geodesic."""

    def __init__(self, distance: float, rho: float):
        self.distance = distance
        self.rho = rho
        super().__init__(f"distance {distance:.6g} is not below rho={rho:.6g}")


class NonPositiveTime(HolonomyError, ValueError):
    """Heat kernel requested at s <= 0."""


class ChartUndefined(HolonomyError):
    """Frame coefficients requested inside a chart's polar cap."""


class ProposalFailure(HolonomyError):
    """Accept-reject proposal exceeded its retry cap."""


class LiftDefect(HolonomyError):
    """Summed lifted increments are not a lattice vector."""


class NotContractible(HolonomyError):
    """A contractible loop was required."""


class EmptySample(HolonomyError, ValueError):
    """A measure was requested from zero samples."""


class DimensionMismatch(HolonomyError, ValueError):
    """Two measures live on groups of different dimension."""


class SubgroupDescriptorError(HolonomyError, ValueError):
    """Closed-subgroup descriptor is not understood."""


class AdmissibilityExhausted(HolonomyError):
    """Too many loops rejected while conditioning on the admissible set."""


class UnsupportedTransport(HolonomyError):
    """Transport scheme is not defined for this manifold/connection pair."""
