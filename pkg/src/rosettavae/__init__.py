"""Anchored VAE training and latent-space reproducibility toolkit."""

from ._kernels import BACKEND, available_backends
from .datasets import Dataset, gen_8gaussians, load_tabular, partition_halfplane, save_tabular, split_train_val
from .distill import EmbeddingTable, embed_dataset, kmeans, load_rosetta, save_rosetta, select_rosetta, select_variant
from .harness import ExperimentConfig, grid_search, run_ablation, run_reproducibility, run_sequential
from .metrics import AffineMap, MapAnalysis, analyze_map, fit_affine, lsd, normalize_by_baseline, retraining_variability
from .vae import (
    ArchSpec,
    GaussianPosterior,
    ModelState,
    RosettaSet,
    TrainConfig,
    decode,
    encode,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AffineMap",
    "ArchSpec",
    "BACKEND",
    "Dataset",
    "EmbeddingTable",
    "ExperimentConfig",
    "GaussianPosterior",
    "MapAnalysis",
    "ModelState",
    "RosettaSet",
    "TrainConfig",
    "analyze_map",
    "available_backends",
    "decode",
    "embed_dataset",
    "encode",
    "fit_affine",
    "gen_8gaussians",
    "grid_search",
    "init_model",
    "kmeans",
    "load_checkpoint",
    "load_rosetta",
    "load_tabular",
    "lsd",
    "normalize_by_baseline",
    "partition_halfplane",
    "retraining_variability",
    "run_ablation",
    "run_reproducibility",
    "run_sequential",
    "save_checkpoint",
    "save_rosetta",
    "save_tabular",
    "select_rosetta",
    "select_variant",
    "split_train_val",
    "train",
    "__version__",
]
