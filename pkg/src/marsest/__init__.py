"""Debiased estimation with structured data imputed from unstructured sources."""

from .aggregate import AggregationSpec, linear_agg_mean, taylor_transform, theta3_hat
from .design import DesignInput, effective_sample_size, feasible_scores, variance_bound
from .eif import Estimate, aipw_mean, did_attgt, iv_effect, ols_coefficient, rdd_local
from .errors import ConfigError, DataValidationError, EstimatorError, MarsError, NumericalError
from .frame import Role, RoleBinding, Table, bind_roles, load_csv
from .kernels import BACKEND
from .mels import MeRegressionProblem, mels_fit
from .simulate import DgpSpec, monte_carlo, run_preset

__version__ = "0.1.0"

__all__ = [
    "AggregationSpec",
    "BACKEND",
    "ConfigError",
    "DataValidationError",
    "DesignInput",
    "DgpSpec",
    "Estimate",
    "EstimatorError",
    "MarsError",
    "MeRegressionProblem",
    "NumericalError",
    "Role",
    "RoleBinding",
    "Table",
    "aipw_mean",
    "bind_roles",
    "did_attgt",
    "effective_sample_size",
    "feasible_scores",
    "iv_effect",
    "linear_agg_mean",
    "load_csv",
    "mels_fit",
    "monte_carlo",
    "ols_coefficient",
    "rdd_local",
    "run_preset",
    "taylor_transform",
    "theta3_hat",
    "variance_bound",
]
