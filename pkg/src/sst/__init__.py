"""Street segmentation toolkit.

Patch-based road segmentation with two pipelines — center-pixel
classification (sliding window) and full-patch regression (nearest-center
stitching) — plus KITTI-layout dataset tooling, pixel metrics and a CLI.
"""

__version__ = "0.1.0"

from .dataset import DatasetSplit, LabeledImage, load_dataset, split_dataset
from .errors import (
    ArgumentError,
    ConfigError,
    DimensionError,
    FormatError,
    ModelLoadError,
    NumericError,
    SstError,
    StateError,
    TrainingError,
)
from .inference import (
    SegmentationResult,
    render_overlay,
    round_probabilities,
    segment_regression,
    segment_sliding_window,
    timed_segment,
)
from .metrics import ConfusionCounts, MetricReport, aggregate, average_precision, basic_metrics, confusion
from .models import ModelDescriptor, builtin_classification, builtin_regression, load, save, train
from .patches import Patch, PatchSpec, center_grid, extract_training_patches, pad_image

__all__ = [name for name in dir() if not name.startswith("_")]
