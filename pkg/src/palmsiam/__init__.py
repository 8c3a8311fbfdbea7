"""Few-shot dual-palm vein verification on a self-contained autograd core."""

from .data import (
    Dataset,
    PairExample,
    Sample,
    SplitSpec,
    load_dataset,
    roi_preprocess,
    sample_episode,
    sample_pairs,
    split,
    synth_generate,
)
from .evaluation import (
    ConfusionCounts,
    MetricsReport,
    classify,
    confusion,
    evaluate,
    metrics,
    threshold_sweep,
)
from .model import (
    CheckpointError,
    FeatureExtractorParams,
    SiameseParams,
    embed_samples,
    extract_features,
    fuse,
    init_params,
    load_checkpoint,
    pair_distance,
    probability,
    probability_values,
    save_checkpoint,
)
from .tensor import Tensor, finite_diff_grad, no_grad
from .training import (
    AdamState,
    EarlyStopper,
    ReduceLROnPlateau,
    TrainConfig,
    TrainHistory,
    adam_step,
    bce_loss,
    contrastive_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "CheckpointError",
    "ConfusionCounts",
    "Dataset",
    "EarlyStopper",
    "FeatureExtractorParams",
    "MetricsReport",
    "PairExample",
    "ReduceLROnPlateau",
    "Sample",
    "SiameseParams",
    "SplitSpec",
    "Tensor",
    "TrainConfig",
    "TrainHistory",
    "adam_step",
    "bce_loss",
    "classify",
    "confusion",
    "contrastive_loss",
    "embed_samples",
    "evaluate",
    "extract_features",
    "finite_diff_grad",
    "fuse",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "metrics",
    "no_grad",
    "pair_distance",
    "probability",
    "probability_values",
    "roi_preprocess",
    "sample_episode",
    "sample_pairs",
    "save_checkpoint",
    "split",
    "synth_generate",
    "threshold_sweep",
    "train",
]
