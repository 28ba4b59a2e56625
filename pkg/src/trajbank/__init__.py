"""Retrieval-based motion prediction over a clustered trajectory bank.

The pipeline: generate or load a dataset, cluster its trajectories into
a bank, train two-tower encoders with a sampled-softmax likelihood,
build a max-inner-product index over the bank embeddings, and read
modes, means, mean-shift modes, samples, or per-mode mixtures off the
search results.
"""

__version__ = "0.1.0"

from .bank import TrajectoryBank, build_bank, h_density, sample_h
from .core import (
    DatasetHeader,
    Example,
    to_agent_frame,
    trajectory_distance,
)
from .encoders import (
    MlpSpec,
    ModelParams,
    encode_scene,
    encode_trajectory,
    init_params,
    load_checkpoint,
    mixture_weights,
    save_checkpoint,
)
from .inference import (
    Prediction,
    predict_mean,
    predict_mean_shift,
    predict_mixture,
    predict_mode_top1,
    sample_posterior,
)
from .metrics import EvalReport, ade, evaluate, fde, hit, ll
from .mips import MipsIndex, build_index, load_index, save_index, search
from .synth import ScenarioSpec, generate, load_dataset, save_dataset
from .trainer import TrainConfig, TrainResult, train

__all__ = [
    "DatasetHeader",
    "EvalReport",
    "Example",
    "MipsIndex",
    "MlpSpec",
    "ModelParams",
    "Prediction",
    "ScenarioSpec",
    "TrainConfig",
    "TrainResult",
    "TrajectoryBank",
    "ade",
    "build_bank",
    "build_index",
    "encode_scene",
    "encode_trajectory",
    "evaluate",
    "fde",
    "generate",
    "h_density",
    "hit",
    "init_params",
    "ll",
    "load_checkpoint",
    "load_dataset",
    "load_index",
    "mixture_weights",
    "predict_mean",
    "predict_mean_shift",
    "predict_mixture",
    "predict_mode_top1",
    "sample_h",
    "sample_posterior",
    "save_checkpoint",
    "save_dataset",
    "save_index",
    "search",
    "to_agent_frame",
    "train",
    "trajectory_distance",
]
