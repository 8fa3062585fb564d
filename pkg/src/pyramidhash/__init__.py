"""Two-pyramid deep hashing for fine-grained image retrieval.

A small float64 autodiff core, a staged convolutional backbone with lateral
hashing heads and consensus fusion, triplet-ranking training, and a packed
binary-code retrieval harness.
"""
from .backbone import StageSpec, build_backbone, desk_stages, paper_stages
from .data import SyntheticSpec, gen_synthetic, load_checkpoint, load_codes, load_dataset, save_checkpoint, save_codes
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError, PyramidHashError
from .kernels import BACKEND
from .pyramid import BinaryCode, HashNet, binarize, build_hashnet, encode_images
from .retrieval import BinaryCodeSet, evaluate, mean_average_precision, precision_at_topN, precision_within_radius, rank_database
from .tensor import Tensor, backward, grad_check
from .training import PAPER_PROFILE, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BinaryCode",
    "BinaryCodeSet",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "HashNet",
    "NumericError",
    "PAPER_PROFILE",
    "PyramidHashError",
    "StageSpec",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "backward",
    "binarize",
    "build_backbone",
    "build_hashnet",
    "desk_stages",
    "encode_images",
    "evaluate",
    "gen_synthetic",
    "grad_check",
    "load_checkpoint",
    "load_codes",
    "load_dataset",
    "mean_average_precision",
    "paper_stages",
    "precision_at_topN",
    "precision_within_radius",
    "rank_database",
    "save_checkpoint",
    "save_codes",
    "train",
]
