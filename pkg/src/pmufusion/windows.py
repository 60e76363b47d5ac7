"""Sliding-window segmentation and the PMU x segment detection/classification matrices."""

from __future__ import annotations

import csv
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import N_CHANNELS, PmuStream, normalize_values
from .vaegan import INFER_CHUNK, VaeGanModel, errors_batch


class InsufficientDataError(ValueError):
    pass


class IncompleteMatrixError(ValueError):
    def __init__(self, pmu: int, segment: int):
        super().__init__(f"no errors for pmu row {pmu}, segment {segment}")
        self.pmu = pmu
        self.segment = segment


@dataclass
class SlidingWindowConfig:
    window_seconds: float = 5.0
    stride_seconds: float = 1.0
    frame_rate: float = 30.0

    def __post_init__(self):
        if not 0 < self.stride_seconds <= self.window_seconds:
            raise ValueError("need 0 < stride <= window")
        for name in ("window_seconds", "stride_seconds"):
            frames = getattr(self, name) * self.frame_rate
            if abs(frames - round(frames)) > 1e-9:
                raise ValueError(f"{name} x frame_rate must be an integer")

    @property
    def window_frames(self) -> int:
        return int(round(self.window_seconds * self.frame_rate))

    @property
    def stride_frames(self) -> int:
        return int(round(self.stride_seconds * self.frame_rate))

    def n_segments(self, n_frames: int) -> int:
        if n_frames < self.window_frames:
            return 0
        return (n_frames - self.window_frames) // self.stride_frames + 1


@dataclass
class Segmentation:
    windows: np.ndarray  # (P, S, N, 6) raw values
    starts: np.ndarray  # (S,) seconds
    valid: np.ndarray  # (P, S) False where the window holds a gap
    pmu_ids: list[int]
    v_rates: list[float]

    @property
    def shape(self) -> tuple[int, int]:
        return self.windows.shape[0], self.windows.shape[1]


def segment_stream(streams: Sequence[PmuStream], config: SlidingWindowConfig) -> Segmentation:
    """Cut aligned PMU streams into overlapping windows.

    Streams are truncated to their shortest common span; a trailing partial
    window is dropped.
    """
    if not streams:
        raise InsufficientDataError("no streams")
    n = min(s.n_frames for s in streams)
    S = config.n_segments(n)
    if S == 0:
        raise InsufficientDataError(
            f"stream of {n / config.frame_rate:.3f} s is shorter than one {config.window_seconds} s window"
        )
    W, step = config.window_frames, config.stride_frames
    P = len(streams)
    windows = np.empty((P, S, W, N_CHANNELS))
    for p, s in enumerate(streams):
        view = np.lib.stride_tricks.sliding_window_view(s.values[:n], W, axis=0)[::step][:S]
        windows[p] = np.swapaxes(view, 1, 2)
    valid = ~np.isnan(windows).any(axis=(2, 3))
    starts = streams[0].start_time + np.arange(S) * config.stride_seconds
    return Segmentation(windows, starts, valid, [s.pmu_id for s in streams], [s.v_rate for s in streams])


def normalized_windows(seg: Segmentation) -> np.ndarray:
    out = np.empty_like(seg.windows)
    for p, v_rate in enumerate(seg.v_rates):
        ok = seg.valid[p]
        out[p, ok] = normalize_values(seg.windows[p, ok], v_rate)
        out[p, ~ok] = np.nan
    return out


def compute_errors(model: VaeGanModel, windows: np.ndarray, threads: int = 1) -> np.ndarray:
    """(P, S, 2) error pairs for normalized windows (P, S, N, 6); NaN where windows are invalid.

    Chunks have a fixed size so results are identical for any thread count.
    """
    P, S = windows.shape[:2]
    flat = windows.reshape(P * S, *windows.shape[2:])
    ok = ~np.isnan(flat).any(axis=(1, 2))
    idx = np.flatnonzero(ok)
    chunks = [idx[a:a + INFER_CHUNK] for a in range(0, idx.size, INFER_CHUNK)]
    out = np.full((P * S, 2), np.nan)
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: errors_batch(model, flat[c]), chunks))
    else:
        results = [errors_batch(model, flat[c]) for c in chunks]
    for c, r in zip(chunks, results):
        out[c] = r
    return out.reshape(P, S, 2)


@dataclass
class DetectionMatrix:
    values: np.ndarray  # (P, S) in {0, 1}
    starts: np.ndarray

    @property
    def shape(self):
        return self.values.shape


@dataclass
class ClassificationMatrix:
    values: np.ndarray  # (P, S) in {0..4}
    starts: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def build_matrices(errors: np.ndarray, detector, classifier, starts=None,
                   windows: np.ndarray | None = None) -> tuple[DetectionMatrix, ClassificationMatrix]:
    """Apply a detector and the classifier to every (PMU, segment) cell.

    ``detector`` is anything with ``flags(errors, windows)``; ``classifier``
    anything with ``predict(errors)``.
    """
    errors = np.asarray(errors, dtype=np.float64)
    P, S = errors.shape[:2]
    missing = np.argwhere(np.isnan(errors).any(axis=2))
    if missing.size:
        p, s = missing[0]
        raise IncompleteMatrixError(int(p), int(s))
    flat = errors.reshape(P * S, 2)
    wflat = None if windows is None else windows.reshape(P * S, *windows.shape[2:])
    det = np.asarray(detector.flags(flat, wflat), dtype=np.int64).reshape(P, S)
    cls = np.asarray(classifier.predict(flat), dtype=np.int64).reshape(P, S)
    if starts is None:
        starts = np.arange(S, dtype=np.float64)
    return DetectionMatrix(det, np.asarray(starts)), ClassificationMatrix(cls, np.asarray(starts))


# -- export ----------------------------------------------------------------

CLASS_COLORS = {
    0: (255, 255, 255),
    1: (228, 26, 28),
    2: (55, 126, 184),
    3: (77, 175, 74),
    4: (152, 78, 163),
    5: (255, 127, 0),
}


def write_matrix_csv(path, values: np.ndarray, starts: Sequence[float]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pmu"] + [f"{t:.3f}" for t in starts])
        for p, row in enumerate(values):
            w.writerow([p] + [int(v) for v in row])


def _upscale(img: np.ndarray, cell: int) -> np.ndarray:
    return np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)


def write_pgm(path, detection: np.ndarray, cell: int = 8) -> None:
    """Binary graymap, black where a segment is flagged."""
    img = np.where(np.asarray(detection) > 0, 0, 255).astype(np.uint8)
    img = _upscale(img, cell)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_ppm(path, labels: np.ndarray, cell: int = 8, colors=None) -> None:
    """Binary pixmap, one color per class label."""
    colors = colors or CLASS_COLORS
    lab = np.asarray(labels, dtype=np.int64)
    img = np.zeros(lab.shape + (3,), dtype=np.uint8)
    for k, rgb in colors.items():
        img[lab == k] = rgb
    img = _upscale(img, cell)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM/PPM file")
    magic, w, h = m.group(1), int(m.group(2)), int(m.group(3))
    body = data[m.end():]
    if magic == b"P5":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    raise ValueError(f"unsupported image type {magic!r}")


def segment_count(duration: float, window: float, stride: float) -> int:
    if duration + 1e-9 < window:
        return 0
    return int(math.floor((duration - window) / stride + 1e-9)) + 1
