"""cellfuse: cell instance segmentation and classification, desk-scale.

Multi-level feature fusion decoder over pluggable encoders, multi-task
heads (3-class semantic map, cell-type map, directional distance maps),
training loop, instance post-processing and panoptic-quality evaluation.
"""

__version__ = "0.1.0"

from .decoder import DecoderConfig, DecoderHeads, HeadOutputs
from .encoders import (
    EncoderSpec,
    FeaturePyramid,
    ToyHierarchicalEncoder,
    ToyIsotropicEncoder,
    read_feature_dump,
    select_blocks,
    write_feature_dump,
)
from .labelmap import InstanceLabelMap
from .losses import LossConfig, TargetBatch, composite_loss
from .metrics import MetricsReport, evaluate_dataset, image_metrics, match_instances, mpq_plus
from .optim import AdamW, ScheduleConfig, onecycle_lr
from .postproc import PostprocParams, postprocess
from .synth import SceneSpec, augment, generate_scene, oversample, split_dataset
from .targets import TargetBundle, make_targets
from .train import Sample, SegModel, fit

__all__ = [
    "AdamW", "DecoderConfig", "DecoderHeads", "EncoderSpec", "FeaturePyramid",
    "HeadOutputs", "InstanceLabelMap", "LossConfig", "MetricsReport",
    "PostprocParams", "Sample", "SceneSpec", "ScheduleConfig", "SegModel",
    "TargetBatch", "TargetBundle", "ToyHierarchicalEncoder", "ToyIsotropicEncoder",
    "augment", "composite_loss", "evaluate_dataset", "fit", "generate_scene",
    "image_metrics", "make_targets", "match_instances", "mpq_plus", "onecycle_lr",
    "oversample", "postprocess", "read_feature_dump", "select_blocks",
    "split_dataset", "write_feature_dump",
]
