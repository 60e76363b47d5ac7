"""Synchrophasor event detection and classification.

A VAE-GAN trained on normal PMU windows produces two error features per
window; a convex hull (or weighted threshold) turns them into detection
flags, a small MLP turns them into event-type labels, and sliding-window
identification plus decision fusion yields one label per analysis window,
with label 5 reserved for detected events of an unseen type.
"""

from .classifier import ClassifierConfig, MlpClassifier, classify, train_classifier
from .data import (
    CHANNELS,
    EVENT_NAMES,
    PmuFrame,
    PmuStream,
    PmuWindow,
    SyntheticConfig,
    SyntheticDataset,
    generate_synthetic,
    normalize_window,
    read_dataset,
    write_dataset,
)
from .decision import ConvexHullRegion, ThresholdRule, build_hull, detect_hull, detect_threshold, tune_threshold
from .envelope import EnvelopeConfig, EnvelopeDetector, detect_envelope, envelope_area
from .evaluation import run_ablation, score
from .fusion import FinalLabel, aggregate_rows, fuse, identify_row, run_pipeline
from .system import FittedSystem, SystemConfig, fit_system
from .vaegan import LossWeights, TrainConfig, VaeGanModel, infer_errors, train
from .windows import SlidingWindowConfig, build_matrices, compute_errors, segment_stream

__version__ = "0.1.0"
