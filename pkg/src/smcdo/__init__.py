"""Spatial Monte Carlo dropout CNN engine with branched multi-sample inference."""

from .errors import ConfigError, DataError, NumericError, ShapeError
from .graph import (
    BranchedModel,
    EnsembleOutput,
    ExecutionCounter,
    LayerSpec,
    ModelGraph,
    aggregate,
    merge_branched,
    run_branched,
    run_deep_ensemble,
    run_mcdo,
    run_vanilla,
    split_at,
)
from .ops import BatchNormParams, ConvParams, DenseParams
from .stochastic import (
    ChannelMask,
    DropoutSpec,
    MaskSeed,
    apply_element_dropout,
    apply_spatial_dropout,
    flop_count,
    fused_dropout_conv,
    sample_spatial_mask,
)
from .trainer import (
    ArchConfig,
    AugmentConfig,
    TrainConfig,
    TrainHistory,
    augment,
    build_mini_segnet,
    build_mini_wrn,
    build_model,
    cross_entropy_loss,
    dice_loss,
    lr_at_epoch,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
