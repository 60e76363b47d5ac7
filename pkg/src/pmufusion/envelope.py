"""Max-envelope baseline: area between moving minimum and maximum bounds."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d

from .data import N_CHANNELS


class InsufficientSignalError(ValueError):
    pass


def moving_extrema(signal: np.ndarray, window_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact max and min over every full window of ``window_len`` samples (last axis)."""
    x = np.asarray(signal, dtype=np.float64)
    n = x.shape[-1]
    if window_len < 1 or n < window_len:
        raise InsufficientSignalError(f"signal of {n} samples is shorter than window {window_len}")
    # centered filters; shift so index k covers x[k : k + window_len]
    origin = -(window_len // 2)
    hi = maximum_filter1d(x, window_len, axis=-1, mode="nearest", origin=origin)
    lo = minimum_filter1d(x, window_len, axis=-1, mode="nearest", origin=origin)
    m = n - window_len + 1
    return hi[..., :m], lo[..., :m]


def envelope_area(signal, window_len: int, period: float = 1.0) -> np.ndarray:
    """Area of the min/max envelope over each full moving window.

    ``area[k] = window_len * period * (max - min)`` over samples k .. k+window_len-1.
    """
    hi, lo = moving_extrema(signal, window_len)
    return window_len * period * (hi - lo)


@dataclass
class EnvelopeConfig:
    window_len: int = 30
    threshold: float | np.ndarray = 1.0
    channels: tuple[bool, ...] = (True,) * N_CHANNELS
    period: float = 1.0 / 30.0

    def __post_init__(self):
        if self.window_len < 2:
            raise ValueError("window_len must be >= 2")
        if np.any(np.asarray(self.threshold) <= 0):
            raise ValueError("threshold must be positive")
        if len(self.channels) != N_CHANNELS:
            raise ValueError(f"channel mask needs {N_CHANNELS} entries")


def channel_peak_areas(windows: np.ndarray, config: EnvelopeConfig) -> np.ndarray:
    """(n, 6) largest envelope area per channel for windows shaped (n, N, 6)."""
    w = np.asarray(windows, dtype=np.float64)
    if w.ndim == 2:
        w = w[None]
    areas = envelope_area(np.swapaxes(w, 1, 2), config.window_len, config.period)
    return areas.max(axis=-1)


@dataclass
class EnvelopeDetector:
    config: EnvelopeConfig = field(default_factory=EnvelopeConfig)

    def flags(self, errors=None, windows=None) -> np.ndarray:
        if windows is None:
            raise ValueError("the envelope detector needs the normalized windows")
        peaks = channel_peak_areas(windows, self.config)
        thr = np.broadcast_to(np.asarray(self.config.threshold, dtype=np.float64), (N_CHANNELS,))
        mask = np.asarray(self.config.channels, dtype=bool)
        return np.any((peaks > thr)[:, mask], axis=1).astype(np.int64)


def detect_envelope(window, config: EnvelopeConfig) -> int:
    values = getattr(window, "values", window)
    return int(EnvelopeDetector(config).flags(windows=np.asarray(values)[None])[0])


def calibrate_envelope(normal_windows: np.ndarray, config: EnvelopeConfig, margin: float = 1.25) -> EnvelopeConfig:
    """Per-channel thresholds at ``margin`` x the largest area seen on normal windows."""
    peaks = channel_peak_areas(normal_windows, config)
    thr = margin * peaks.max(axis=0)
    thr = np.where(thr > 0, thr, np.finfo(float).tiny)
    return EnvelopeConfig(config.window_len, thr, config.channels, config.period)


def save_envelope(config: EnvelopeConfig, path) -> None:
    thr = np.broadcast_to(np.asarray(config.threshold, dtype=np.float64), (N_CHANNELS,))
    lines = [
        f"window_len = {config.window_len}",
        f"period = {config.period!r}",
        "threshold = " + " ".join(repr(float(v)) for v in thr),
        "channels = " + " ".join(str(int(c)) for c in config.channels),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_envelope(path) -> EnvelopeConfig:
    kv = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            kv[k.strip()] = v.split()
    return EnvelopeConfig(
        window_len=int(kv["window_len"][0]),
        threshold=np.array([float(v) for v in kv["threshold"]]),
        channels=tuple(bool(int(c)) for c in kv["channels"]),
        period=float(kv["period"][0]),
    )
