"""Box-supervised segmentation with parallel and polar multiple instance learning."""

from .bags import AngleSet, Bag, BagPlan
from .data import Dataset, PerturbSpec, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .estimator import BoxMILSegmenter, adam_step, dice_per_group
from .geometry import BBox, PolarGrid, PolarSpec
from .harness import EvalReport, TrainConfig, evaluate, grid_search, run_experiment, train
from .losses import BagLayout, LossConfig, bag_layout, batch_loss, mil_baseline_loss, total_loss
from .smoothmax import SmoothMaxKind, alpha_quasimax, alpha_softmax, polar_weights, weighted_smoothmax
from .validation import BoundsError, ContractError, EvaluationError, FormatError, GenerationError

__all__ = [
    "AngleSet", "BBox", "Bag", "BagLayout", "BagPlan", "BoundsError", "BoxMILSegmenter", "ContractError",
    "Dataset", "EvalReport", "EvaluationError", "FormatError", "GenerationError", "LossConfig",
    "PerturbSpec", "PolarGrid", "PolarSpec", "SmoothMaxKind", "SyntheticSpec", "TrainConfig",
    "adam_step", "alpha_quasimax", "alpha_softmax", "bag_layout", "batch_loss", "dice_per_group", "evaluate",
    "generate_synthetic", "grid_search", "load_dataset", "mil_baseline_loss", "polar_weights",
    "run_experiment", "save_dataset", "total_loss", "train", "weighted_smoothmax",
]
