"""Difference-in-differences with double machine learning for repeated cross-sections."""

from diddml.config import DidDmlConfig, ForestConfig, RunConfig, TwfeSpec, load_config
from diddml.data_model import RepeatedCrossSection, load_csv, two_by_two_table
from diddml.errors import DidDmlError
from diddml.estimator import AtetEstimate, estimate_atet
from diddml.parametric_did import fit_twfe

__all__ = [
    "AtetEstimate",
    "DidDmlConfig",
    "DidDmlError",
    "ForestConfig",
    "RepeatedCrossSection",
    "RunConfig",
    "TwfeSpec",
    "estimate_atet",
    "fit_twfe",
    "load_config",
    "load_csv",
    "two_by_two_table",
]
