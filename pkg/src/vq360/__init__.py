"""Blind quality assessment for 360-degree (equirectangular) video.

The package is a self-contained numpy implementation: a tape-based
reverse-mode autodiff engine, spherical sampled convolutions, a
multi-level spatial subnet with selective fusion, motion-difference
frame fusion, temporal non-local aggregation, a score regression head,
plus training, metrics, synthetic data, and a finite-difference
gradient audit.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DatasetManifest,
    SynthConfig,
    VideoEntry,
    load_frame,
    load_manifest,
    load_video,
    normalize_score,
    save_manifest,
    synth_generate,
)
from .engine import Parameter, Tape, Tensor, backward, tensor
from .errors import (
    CheckpointError,
    ConfigError,
    DataBoundsError,
    ManifestError,
    NonFiniteError,
    ShapeError,
    TapeConsumedError,
    UndefinedCorrelationError,
)
from .metrics import (
    MetricReport,
    evaluate_scores,
    krocc,
    logistic_fit,
    mae,
    plcc,
    rmse,
    srocc,
)
from .model import ModelConfig, QualityModel
from .sphere import build_sampling_grid, erp_to_sphere, sphere_to_erp
from .training import (
    TrainConfig,
    TrainResult,
    load_model,
    sample_clips,
    save_model,
    score_video,
    train_loop,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataBoundsError",
    "DatasetManifest",
    "ManifestError",
    "MetricReport",
    "ModelConfig",
    "NonFiniteError",
    "Parameter",
    "QualityModel",
    "ShapeError",
    "SynthConfig",
    "Tape",
    "TapeConsumedError",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "UndefinedCorrelationError",
    "VideoEntry",
    "backward",
    "build_sampling_grid",
    "erp_to_sphere",
    "evaluate_scores",
    "krocc",
    "load_checkpoint",
    "load_frame",
    "load_manifest",
    "load_model",
    "load_video",
    "logistic_fit",
    "mae",
    "normalize_score",
    "plcc",
    "rmse",
    "sample_clips",
    "save_checkpoint",
    "save_manifest",
    "save_model",
    "score_video",
    "sphere_to_erp",
    "srocc",
    "synth_generate",
    "tensor",
    "train_loop",
    "__version__",
]
