"""Neural Vecchia approximation for Gaussian processes.

Networks map a conditioning set of locations to kriging coefficients and a
conditional standard deviation, replacing the exact per-point conditional
laws of a Vecchia approximation.
"""

from .errors import NeuVecError
from .kernels import KernelSpec, covariance_matrix, table2_spec
from .linalg import Rng
from .nn import NeuVecModel, preset_config
from .vecchia import ConditionalLaw, ConditioningPlan, build_plan, vecchia_nll

__version__ = "0.1.0"

__all__ = [
    "ConditionalLaw", "ConditioningPlan", "KernelSpec", "NeuVecError", "NeuVecModel", "Rng",
    "build_plan", "covariance_matrix", "preset_config", "table2_spec", "vecchia_nll",
]
