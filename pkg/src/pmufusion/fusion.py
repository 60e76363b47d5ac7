"""Row identification, cross-PMU aggregation and detection/classification fusion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PmuStream
from .vaegan import VaeGanModel
from .windows import (
    ClassificationMatrix,
    DetectionMatrix,
    SlidingWindowConfig,
    compute_errors,
    build_matrices,
    normalized_windows,
    segment_stream,
)

UNKNOWN = 5


class FusionContractError(ValueError):
    pass


def longest_run(row: Sequence[int]) -> tuple[int, int]:
    """(label, length) of the longest run of one nonzero label; earliest wins ties."""
    best_label, best_len = 0, 0
    cur_label, cur_len = None, 0
    for v in row:
        v = int(v)
        if v == cur_label:
            cur_len += 1
        else:
            cur_label, cur_len = v, 1
        if v != 0 and cur_len > best_len:
            best_label, best_len = v, cur_len
    return best_label, best_len


def identify_row(row: Sequence[int], eta: int) -> int:
    """Label of the longest nonzero run if that run is longer than ``eta``, else 0."""
    if eta < 1:
        raise ValueError("eta must be >= 1")
    label, length = longest_run(row)
    return label if length > eta else 0


def aggregate_rows(row_labels: Sequence[int]) -> int:
    """Most frequent nonzero row label; 0 if every row is 0. Ties go to the lower label."""
    labels = np.asarray(row_labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("need at least one row")
    nz = labels[labels != 0]
    if nz.size == 0:
        return 0
    return int(np.argmax(np.bincount(nz)))


@dataclass
class FinalLabel:
    value: int
    detection: int
    classification: int
    provenance: dict = field(default_factory=dict)


def fuse(detection: int, classification: int) -> FinalLabel:
    """Combine the system detection bit and classification label.

    (0, 0) -> 0, (1, 0) -> 5 (unknown), (d, c) -> c for c in 1..4.
    """
    d, c = int(detection), int(classification)
    if d not in (0, 1) or not 0 <= c <= 4:
        raise FusionContractError(f"fusion inputs out of domain: detection={detection}, classification={classification}")
    value = c if c else (UNKNOWN if d else 0)
    return FinalLabel(value, d, c)


def fuse_array(detection: np.ndarray, classification: np.ndarray) -> np.ndarray:
    d = np.asarray(detection, dtype=np.int64)
    c = np.asarray(classification, dtype=np.int64)
    return np.where(c > 0, c, np.where(d > 0, UNKNOWN, 0))


@dataclass
class PipelineResult:
    final: FinalLabel
    errors: np.ndarray
    detection: DetectionMatrix
    classification: ClassificationMatrix
    detection_rows: list[int]
    classification_rows: list[int]
    eta: int
    pmu_ids: list[int]


def identify_matrices(detection: DetectionMatrix, classification: ClassificationMatrix,
                      eta: int, eta_detection: int | None = None):
    det_rows = [identify_row(r, eta_detection or eta) for r in detection.values]
    cls_rows = [identify_row(r, eta) for r in classification.values]
    return det_rows, cls_rows, aggregate_rows(det_rows), aggregate_rows(cls_rows)


def run_pipeline(streams: Sequence[PmuStream], model: VaeGanModel, detector, classifier,
                 window_config: SlidingWindowConfig, eta: int, threads: int = 1,
                 eta_detection: int | None = None) -> PipelineResult:
    """Segment -> errors -> matrices -> identification -> fusion for one analysis window.

    Segments where any PMU has missing frames are dropped.
    """
    seg = segment_stream(streams, window_config)
    keep = seg.valid.all(axis=0)
    norm = normalized_windows(seg)[:, keep]
    errors = compute_errors(model, norm, threads)
    det, cls = build_matrices(errors, detector, classifier, seg.starts[keep], windows=norm)
    det_rows, cls_rows, d_sys, c_sys = identify_matrices(det, cls, eta, eta_detection)
    final = fuse(d_sys, c_sys)
    final.provenance = {
        "detection_rows": det_rows,
        "classification_rows": cls_rows,
        "system_detection": d_sys,
        "system_classification": c_sys,
        "eta": eta,
    }
    return PipelineResult(final, errors, det, cls, det_rows, cls_rows, eta, seg.pmu_ids)


def decision_report(result: PipelineResult, matrix_paths: dict[str, str] | None = None) -> str:
    record = {
        "final_label": result.final.value,
        "system_detection": result.final.detection,
        "system_classification": result.final.classification,
        "detection_rows": result.detection_rows,
        "classification_rows": result.classification_rows,
        "pmu_ids": list(result.pmu_ids),
        "eta": result.eta,
        "segments": int(result.detection.values.shape[1]),
        "matrix_files": dict(sorted((matrix_paths or {}).items())),
    }
    return json.dumps(record, indent=2, sort_keys=True) + "\n"


def write_report(path, result: PipelineResult, matrix_paths=None) -> None:
    Path(path).write_text(decision_report(result, matrix_paths))
