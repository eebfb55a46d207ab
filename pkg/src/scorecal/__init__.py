"""Speaker verification score calibration: cosine scoring, adaptive s-norm,
affine and condition-aware neural calibration, and detection metrics."""

from .data import EmbeddingSet, ScoreSet, Trial, TrialList, read_embeddings, read_scores, read_trials
from .linear import LinearCalibration, apply_affine, cllr, train_linear, weighted_bce
from .metrics import act_dcf, det_sweep, eer, min_dcf, report
from .neural import MagnetoModel, SonetModel, TrainConfig, final_tune, train_calibrator
from .scoring import cosine_score, score_trials
from .snorm import Cohort, snorm

__version__ = "0.1.0"

__all__ = [
    "EmbeddingSet", "ScoreSet", "Trial", "TrialList", "read_embeddings", "read_scores", "read_trials",
    "LinearCalibration", "apply_affine", "cllr", "train_linear", "weighted_bce",
    "act_dcf", "det_sweep", "eer", "min_dcf", "report",
    "MagnetoModel", "SonetModel", "TrainConfig", "final_tune", "train_calibrator",
    "cosine_score", "score_trials", "Cohort", "snorm",
]
