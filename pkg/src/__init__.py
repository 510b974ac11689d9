"""
milforge
========

Attention-based multiple instance learning for whole slide images:
tissue tiling, patch embeddings, MIL aggregation heads on a small
reverse-mode autodiff core, cross-validated training and attention
heatmaps.
"""

__version__ = "0.1.0"
__description__ = "Attention-based multiple instance learning for whole slide images"

from .milforge_errors import MilForgeError
from .milforge_autodiff import Tape, OptimizerState, adam_step, gradient_check
from .milforge_tiling import (
    Magnification,
    SegmentationConfig,
    SlidePyramid,
    ArraySlide,
    open_slide,
    segment_tissue,
    build_patch_grid,
    PatchGrid,
)
from .milforge_features import FeatureBag, FeatureStore, LabelSpace, baseline_extract, read_embeddings, write_embeddings
from .milforge_models import MilVariant, ModelConfig, MilModel, total_loss, save_checkpoint, load_checkpoint
from .milforge_trainer import TrainConfig, make_splits, train_fold, cross_validate, auc, aggregate, make_synthetic_bags
from .milforge_heatmap import HeatmapSpec, normalize_scores, render_overlay, export_top_patches
from .milforge_config import ProjectConfig, load_config

__all__ = [
    "MilForgeError",
    "Tape", "OptimizerState", "adam_step", "gradient_check",
    "Magnification", "SegmentationConfig", "SlidePyramid", "ArraySlide", "open_slide",
    "segment_tissue", "build_patch_grid", "PatchGrid",
    "FeatureBag", "FeatureStore", "LabelSpace", "baseline_extract", "read_embeddings", "write_embeddings",
    "MilVariant", "ModelConfig", "MilModel", "total_loss", "save_checkpoint", "load_checkpoint",
    "TrainConfig", "make_splits", "train_fold", "cross_validate", "auc", "aggregate", "make_synthetic_bags",
    "HeatmapSpec", "normalize_scores", "render_overlay", "export_top_patches",
    "ProjectConfig", "load_config",
]
