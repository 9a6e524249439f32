"""MSCA-Net for infrared small-target segmentation.

Attention blocks (MSEDA, PCBAM, CAB), the U-Net that hosts them, a training
loop, the pixel- and target-level metrics used for IRSTD benchmarks, and a
synthetic small-target generator for desk-scale checks.
"""
from .blocks import (
    CAB,
    MSEDA,
    PCBAM,
    ChannelAttention,
    LayerNorm2d,
    MultiDilateAttention,
    PositionAttention,
    SpatialAttention,
)
from .data import (
    SegmentationSample,
    SynthConfig,
    load_dataset,
    load_samples,
    split_samples,
    synth_generate,
    write_dataset,
)
from .errors import ConfigError, LoadError, MscaNetError, NumericError, ShapeError, UndefinedMetricError
from .metrics import MetricReport, compute_report, fa, iou, match_targets, niou, pd, roc_curve
from .network import MSCANet, NetworkConfig, build_mscanet, load_checkpoint, save_checkpoint
from .train_eval import TrainConfig, cosine_lr, evaluate, predict, train

__version__ = "0.1.0"

__all__ = [
    "CAB", "MSEDA", "PCBAM", "ChannelAttention", "LayerNorm2d", "MultiDilateAttention",
    "PositionAttention", "SpatialAttention",
    "SegmentationSample", "SynthConfig", "load_dataset", "load_samples", "split_samples",
    "synth_generate", "write_dataset",
    "ConfigError", "LoadError", "MscaNetError", "NumericError", "ShapeError", "UndefinedMetricError",
    "MetricReport", "compute_report", "fa", "iou", "match_targets", "niou", "pd", "roc_curve",
    "MSCANet", "NetworkConfig", "build_mscanet", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "cosine_lr", "evaluate", "predict", "train",
]
