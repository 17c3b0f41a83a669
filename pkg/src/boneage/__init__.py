"""Bone age regression from hand radiographs with transfer-learned CNN backbones."""

from .data import (
    DatasetManifest,
    DatasetStats,
    SampleRecord,
    SplitAssignment,
    build_synthetic_dataset,
    compute_stats,
    load_manifest,
    make_splits,
)
from .engine import (
    EvalResult,
    TrainConfig,
    TrainHistory,
    early_stop_check,
    evaluate,
    mae_metric,
    mse_loss,
    train,
)
from .models import HeadConfig, Regime, build_model, forward, list_backbones, trainable_parameter_count
from .reporting import RunResult, emit_plot, render_comparison_table, write_bias_report
from .transforms import AugmentParams, PreprocessSpec, TransformConfig, augment_image, make_batch, preprocess_image

__version__ = "0.1.0"
