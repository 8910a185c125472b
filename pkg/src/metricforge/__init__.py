"""Learned translation-quality metric: small transformer regressor, synthetic
pre-training data, score denoising, metric combination and daRR evaluation."""

from .combine import WeightVector, combine_scores, tune_weights, uniform_weights
from .data import Dataset, ScoredQuadruple, Segment, load_segments, save_segments, zscore_by_group
from .denoise import DenoiseConfig, EnsembleMatrix, denoise
from .encoder import EncoderConfig, TokenizerConfig
from .errors import (ConfigError, DataFormatError, DegenerateInputError, MetricForgeError, MissingArtifactError,
                     NonFiniteLossError)
from .evaluation import darr_pairs, darr_tau, evaluate, kfold_split, pearson
from .regression import (ModelBundle, TrainConfig, load_checkpoint, new_bundle, predict, predict_many,
                         save_checkpoint, train, verify_gradients)
from .synthesis import NoiseConfig, build_pretrain_corpus, corrupt_corpus, word_drop

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataFormatError", "Dataset", "DegenerateInputError", "DenoiseConfig", "EncoderConfig",
    "EnsembleMatrix", "MetricForgeError", "MissingArtifactError", "ModelBundle", "NoiseConfig",
    "NonFiniteLossError", "ScoredQuadruple", "Segment", "TokenizerConfig", "TrainConfig", "WeightVector",
    "build_pretrain_corpus", "combine_scores", "corrupt_corpus", "darr_pairs", "darr_tau", "denoise",
    "evaluate", "kfold_split", "load_checkpoint", "load_segments", "new_bundle", "pearson", "predict",
    "predict_many", "save_checkpoint", "save_segments", "train", "tune_weights", "uniform_weights",
    "verify_gradients", "word_drop", "zscore_by_group",
]
