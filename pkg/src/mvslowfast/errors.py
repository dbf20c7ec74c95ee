"""Exception types raised across the toolkit."""


class MVError(Exception):
    """Base class for toolkit errors."""


class NonFiniteError(MVError, FloatingPointError):
    """A state, coefficient or integrand produced NaN/Inf."""

    def __init__(self, message, *, index=None, term=None, atom=None):
        super().__init__(message)
        self.index = index
        self.term = term
        self.atom = atom


class StiffnessError(MVError):
    """Micro step too large for the 1/epsilon fast drift."""


class DegenerateProbeError(MVError):
    """Every sampled pair had a zero denominator."""


class NotContractingError(MVError):
    """Two fast clouds driven by the same noise do not approach each other."""


class NonStationaryError(MVError):
    """Batch means of the post burn-in samples disagree."""


class NoisyEstimateError(MVError):
    """A Monte Carlo estimate is dominated by its own noise."""


class ConfigError(MVError, ValueError):
    """Invalid run configuration."""
