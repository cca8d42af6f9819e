"""Spatio-temporal attention graph network for remaining-useful-life prediction."""

from .dataset import EngineTrajectory, WindowSet, label_rul, make_windows, parse_cmapss
from .evaluation import PredictionSet, evaluate, rmse, score
from .graph import AdjacencyMatrix, build_adjacency, normalize_propagation
from .model import VARIANTS, Model, ModelConfig, ModelState, assemble
from .normalization import NormStats, apply_norm, assign, fit_kmeans, fit_norm
from .tensor import Tape, Tensor, backward, gradient_check
from .training import DatasetBundle, TrainConfig, TrainReport, adam_step, run_trials, train

__version__ = "0.1.0"
