"""Coherent conformal factuality over claim dependency graphs.

The hard filter (:mod:`cohconf.hard_cf`) is what gets deployed; the relaxed
pipeline (:mod:`cohconf.soft`) exists so a claim scorer can be trained
end to end through calibration and prediction (:mod:`cohconf.training`).
"""

from .adg import AdgProblem, Claim, FeatureSchema, make_problem
from .errors import CohConfError
from .hard_cf import ScorerParams, Sentinel, hard_calibrate, hard_nonconformity, hard_predict, split_quantile
from .soft import SoftConfig, preset
from .training import TrainConfig, train_scorer

__all__ = [
    "AdgProblem", "Claim", "CohConfError", "FeatureSchema", "ScorerParams", "Sentinel", "SoftConfig",
    "TrainConfig", "hard_calibrate", "hard_nonconformity", "hard_predict", "make_problem", "preset",
    "split_quantile", "train_scorer",
]
__version__ = "0.1.0"
