"""Confusion matrices, per-class metrics and the four-scenario ablation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fusion import aggregate_rows, fuse_array, identify_row, fuse


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, cols = prediction

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]


@dataclass
class MetricsReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    precision_undefined: np.ndarray
    recall_undefined: np.ndarray
    scenario: str = ""
    granularity: str = ""
    detection_accuracy: float | None = None
    n_samples: int = 0
    confusion: ConfusionMatrix | None = None
    notes: dict = field(default_factory=dict)


def confusion_matrix(predictions, truths, k: int) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64).reshape(-1)
    t = np.asarray(truths, dtype=np.int64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions vs {t.size} truths")
    if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return ConfusionMatrix(cm)


def score(predictions, truths, k: int, scenario: str = "", granularity: str = "") -> tuple[ConfusionMatrix, MetricsReport]:
    """Accuracy and per-class precision/recall/F1.

    A zero denominator yields 0 and sets the matching ``*_undefined`` flag.
    """
    cm = confusion_matrix(predictions, truths, k)
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    col = c.sum(axis=0)
    row = c.sum(axis=1)
    p_undef = col == 0
    r_undef = row == 0
    precision = np.divide(tp, col, out=np.zeros(k), where=~p_undef)
    recall = np.divide(tp, row, out=np.zeros(k), where=~r_undef)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(k), where=denom > 0)
    acc = float(tp.sum() / c.sum()) if c.sum() else 0.0
    report = MetricsReport(acc, precision, recall, f1, p_undef, r_undef, scenario, granularity,
                           n_samples=cm.total, confusion=cm)
    return cm, report


# -- ablation ----------------------------------------------------------------

SCENARIOS = {
    # name: (decision fusion, sliding window)
    "scenario1": (False, False),
    "scenario2": (True, False),
    "scenario3": (False, True),
    "scenario4": (True, True),
}


@dataclass
class SceneOutputs:
    """Per-scene matrices and ground truth, the shared input of every scenario."""

    label: int
    segment_labels: np.ndarray  # (S,)
    detection: np.ndarray  # (P, S)
    classification: np.ndarray  # (P, S)


def run_ablation(scenes: Sequence[SceneOutputs], eta: int, k: int = 6) -> dict[str, MetricsReport]:
    """Score the four fusion / sliding-window combinations on identical outputs.

    Without the sliding window every labeled (PMU, segment) cell is scored on
    its own; with it, each scene is one sample labeled after identification.
    """
    cell_truth, cell_det, cell_cls = [], [], []
    scene_truth, scene_det, scene_cls = [], [], []
    for sc in scenes:
        P = sc.detection.shape[0]
        cell_truth.append(np.broadcast_to(sc.segment_labels, (P, sc.segment_labels.size)).reshape(-1))
        cell_det.append(sc.detection.reshape(-1))
        cell_cls.append(sc.classification.reshape(-1))
        scene_truth.append(sc.label)
        scene_det.append(aggregate_rows([identify_row(r, eta) for r in sc.detection]))
        scene_cls.append(aggregate_rows([identify_row(r, eta) for r in sc.classification]))
    ct = np.concatenate(cell_truth)
    cd = np.concatenate(cell_det)
    cc = np.concatenate(cell_cls)
    st = np.asarray(scene_truth)
    sd = np.asarray(scene_det)
    sc_ = np.asarray(scene_cls)

    reports = {}
    _, r1 = score(cc, ct, k, "scenario1", "segment")
    reports["scenario1"] = r1
    _, r2 = score(fuse_array(cd, cc), ct, k, "scenario2", "segment")
    r2.detection_accuracy = float(np.mean((cd > 0) == (ct > 0)))
    reports["scenario2"] = r2
    _, r3 = score(sc_, st, k, "scenario3", "scene")
    reports["scenario3"] = r3
    final = np.array([fuse(d, c).value for d, c in zip(sd, sc_)], dtype=np.int64)
    _, r4 = score(final, st, k, "scenario4", "scene")
    r4.detection_accuracy = float(np.mean((sd > 0) == (st > 0)))
    reports["scenario4"] = r4
    return reports


def format_report(report: MetricsReport) -> str:
    lines = [f"{report.scenario} ({report.granularity}, n={report.n_samples})",
             f"  accuracy            {report.accuracy:.4f}"]
    if report.detection_accuracy is not None:
        lines.append(f"  detection accuracy  {report.detection_accuracy:.4f}")
    else:
        lines.append("  detection accuracy  -")
    lines.append("  class  precision  recall  f1")
    for k in range(report.precision.size):
        flag = " (no support)" if report.recall_undefined[k] else ""
        lines.append(f"  {k:>5}  {report.precision[k]:9.3f}  {report.recall[k]:6.3f}  {report.f1[k]:.3f}{flag}")
    if report.confusion is not None:
        lines.append("  confusion (rows truth, cols predicted):")
        for row in report.confusion.counts:
            lines.append("    " + " ".join(f"{int(v):6d}" for v in row))
    return "\n".join(lines) + "\n"


def write_reports_csv(path, reports: dict[str, MetricsReport]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        k = next(iter(reports.values())).precision.size
        header = ["scenario", "granularity", "n", "accuracy", "detection_accuracy"]
        for c in range(k):
            header += [f"precision_{c}", f"recall_{c}", f"f1_{c}"]
        w.writerow(header)
        for name, r in reports.items():
            row = [name, r.granularity, r.n_samples, f"{r.accuracy:.6f}",
                   "" if r.detection_accuracy is None else f"{r.detection_accuracy:.6f}"]
            for c in range(k):
                row += [f"{r.precision[c]:.6f}", f"{r.recall[c]:.6f}", f"{r.f1[c]:.6f}"]
            w.writerow(row)


def write_confusion_ppm(path, cm: ConfusionMatrix, cell: int = 24) -> None:
    """Heat image of a confusion matrix; each row is normalized by its truth count."""
    c = cm.counts.astype(np.float64)
    rows = c.sum(axis=1, keepdims=True)
    frac = np.divide(c, rows, out=np.zeros_like(c), where=rows > 0)
    shade = (255 * (1.0 - frac)).astype(np.uint8)
    img = np.stack([shade, shade, np.full_like(shade, 255)], axis=-1)
    img = np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())
