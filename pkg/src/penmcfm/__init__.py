"""Penalized Weibull mixture cure frailty model (penMCFM).

EM and stagewise (GMIFS) fitting of a mixture cure model with gamma frailty
on the latency part, plus simulation, evaluation metrics and tuning tools.
"""

__version__ = "0.1.0"

from .data import ColumnRoles, DataValidationError, SurvivalDataset, load_csv, make_dataset
from .em import FitResult, PathResult, PenaltyLevel, fit_em, fit_path, initialize
from .gmifs import GmifsResult, gmifs_fit
from .metrics import c_statistic, c_statistic_cure, selection_metrics
from .model import ParamSet, observed_log_likelihood
from .optim import PenaltyConfig
from .simulate import SimulationScenario, simulate

__all__ = [
    "ColumnRoles",
    "DataValidationError",
    "FitResult",
    "GmifsResult",
    "ParamSet",
    "PathResult",
    "PenaltyConfig",
    "PenaltyLevel",
    "SimulationScenario",
    "SurvivalDataset",
    "c_statistic",
    "c_statistic_cure",
    "fit_em",
    "fit_path",
    "gmifs_fit",
    "initialize",
    "load_csv",
    "make_dataset",
    "observed_log_likelihood",
    "selection_metrics",
    "simulate",
]
