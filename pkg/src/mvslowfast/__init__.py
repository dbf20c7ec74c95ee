"""Particle simulation and rate verification for slow-fast McKean-Vlasov SDEs."""

from .errors import (ConfigError, DegenerateProbeError, MVError, NoisyEstimateError,
                     NonFiniteError, NonStationaryError, NotContractingError, StiffnessError)
from .measure import EmpiricalMeasure, integrate, lions_derivative, wasserstein2
from .model import (AssumptionReport, Example61Params, ModelSpec, build_example_model,
                    make_model, probe_dissipativity, probe_lipschitz)

__version__ = "0.1.0"
