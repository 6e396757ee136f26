"""Fusion, post-processing and evaluation of cell detections."""

from .fusion import STAGE1, STAGE2, FusionConfig, fuse, fuse_two_stage, match_pairs
from .geometry import BBox, Detection, GroundTruth, Source, centroid_distance, iou
from .heatmap import PeakConfig, extract_peaks, multiscale_average, render_targets
from .metrics import EvalReport, average_precision, evaluate, map50_95, match, summary_metrics, sweep
from .postprocess import (
    PostprocessConfig,
    classifier_gate,
    density_filter,
    label_hard_negatives,
    nms,
    run_pipeline,
)

__version__ = "0.1.0"
