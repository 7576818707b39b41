"""Proximal indirect comparison of treatments across two randomized trials."""

from .data import Dataset, DataValidationError, load_dataset, load_two_trials
from .estimators import EstimateReport

__all__ = ["Dataset", "DataValidationError", "EstimateReport", "load_dataset",
           "load_two_trials"]
__version__ = "0.1.0"
