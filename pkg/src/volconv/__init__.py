"""Volumetric CNNs with regional segmentation, on a CPU im2col + GEMM engine."""
from .conv import BenchRecord, ConvFilter, GemmShape, conv3d_backward, conv3d_forward, gemm_shape
from .data import Dataset, GeneratorConfig, Split, generate_arrays, generate_dataset, load_dataset, prepool
from .errors import FormatError, ShapeError
from .model import ArchitectureSpec, Network, build, count_params, load_weights, save_weights
from .segmentation import SegmentationPlan, make_plan, overlap_score, orient_regions, segment
from .tensor import Rng
from .training import RunResult, TrainConfig, sweep_hidden_units, sweep_k, sweep_train_size, train

__all__ = [
    "ArchitectureSpec", "BenchRecord", "ConvFilter", "Dataset", "FormatError", "GemmShape",
    "GeneratorConfig", "Network", "Rng", "RunResult", "SegmentationPlan", "ShapeError", "Split",
    "TrainConfig", "build", "conv3d_backward", "conv3d_forward", "count_params",
    "gemm_shape", "generate_arrays", "generate_dataset", "load_dataset", "load_weights",
    "make_plan", "orient_regions", "overlap_score", "prepool", "save_weights", "segment",
    "sweep_hidden_units", "sweep_k", "sweep_train_size", "train",
]
