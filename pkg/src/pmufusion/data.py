"""PMU records, per-window normalization, CSV ingestion and synthetic datasets.

Column order everywhere is ``va, vb, vc, i, f, df``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.signal import lfilter

from .nn import make_rng

log = logging.getLogger(__name__)

CHANNELS = ("va", "vb", "vc", "i", "f", "df")
CSV_HEADER = ("t", "pmu") + CHANNELS
N_CHANNELS = len(CHANNELS)

EVENT_NAMES = {
    0: "non-event",
    1: "voltage sag",
    2: "frequency excursion",
    3: "sustained oscillation",
    4: "current step",
    5: "unknown",
}
KNOWN_TYPES = (1, 2, 3, 4)
UNKNOWN_TYPE = 5


class PmuDataError(ValueError):
    pass


class InvalidRatingError(PmuDataError):
    pass


class CorruptDataError(PmuDataError):
    pass


class CsvParseError(PmuDataError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


class OrderingError(PmuDataError):
    pass


class EmptyConfigError(PmuDataError):
    pass


@dataclass(frozen=True)
class PmuFrame:
    timestamp: float
    pmu_id: int
    va: float
    vb: float
    vc: float
    i: float
    f: float
    df: float

    def values(self) -> tuple[float, ...]:
        return (self.va, self.vb, self.vc, self.i, self.f, self.df)


@dataclass
class PmuWindow:
    values: np.ndarray  # (N, 6)
    pmu_id: int = 0
    start_time: float = 0.0
    v_rate: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != N_CHANNELS:
            raise PmuDataError(f"window must be N x {N_CHANNELS}, got {self.values.shape}")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]


@dataclass
class PmuStream:
    """Contiguous multi-channel record of one PMU. Missing frames are NaN rows."""

    pmu_id: int
    values: np.ndarray  # (T, 6)
    frame_rate: float
    start_time: float = 0.0
    v_rate: float = 1.0

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def duration(self) -> float:
        return self.n_frames / self.frame_rate

    def slice_seconds(self, start: float, stop: float) -> "PmuStream":
        a = int(round((start - self.start_time) * self.frame_rate))
        b = int(round((stop - self.start_time) * self.frame_rate))
        return replace(self, values=self.values[a:b], start_time=start)


def normalize_values(values: np.ndarray, v_rate: float) -> np.ndarray:
    """Per-unit voltages, then subtract each column's window mean.

    Current, frequency and ROCOF are only mean-subtracted.
    """
    if not v_rate > 0:
        raise InvalidRatingError(f"rated voltage must be positive, got {v_rate}")
    x = np.array(values, dtype=np.float64)
    if x.shape[0] < 1:
        raise PmuDataError("window has no samples")
    if np.isnan(x).any():
        raise CorruptDataError("window contains NaN")
    x[..., :3] /= v_rate
    x -= x.mean(axis=-2, keepdims=True)
    return x


def normalize_window(raw: PmuWindow) -> PmuWindow:
    return replace(raw, values=normalize_values(raw.values, raw.v_rate), v_rate=1.0)


# -- CSV -------------------------------------------------------------------

def load_csv_stream(path, frame_rate: float) -> dict[int, list[PmuFrame]]:
    """Read frames in the ``t,pmu,va,vb,vc,i,f,df`` schema, grouped per PMU.

    Gaps (missing frame periods) are logged as warnings; use
    :func:`frames_to_stream` to turn a group into a NaN-padded stream.
    """
    path = Path(path)
    groups: dict[int, list[PmuFrame]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(path, 1, "missing header") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise CsvParseError(path, 1, f"header must be {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise CsvParseError(path, lineno, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                t = float(row[0])
                pmu = int(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise CsvParseError(path, lineno, str(exc)) from None
            groups.setdefault(pmu, []).append(PmuFrame(t, pmu, *vals))
    period = 1.0 / frame_rate
    for pmu, frames in groups.items():
        for a, b in zip(frames, frames[1:]):
            if b.timestamp <= a.timestamp:
                raise OrderingError(f"pmu {pmu}: timestamp {b.timestamp} after {a.timestamp}")
            if b.timestamp - a.timestamp > 1.5 * period:
                log.warning("pmu %d: gap between t=%.6f and t=%.6f", pmu, a.timestamp, b.timestamp)
    return dict(sorted(groups.items()))


def frames_to_stream(frames: list[PmuFrame], frame_rate: float, v_rate: float) -> PmuStream:
    """Place frames on the regular time grid; missing slots become NaN rows."""
    if not frames:
        raise PmuDataError("no frames")
    t0 = frames[0].timestamp
    idx = np.array([int(round((fr.timestamp - t0) * frame_rate)) for fr in frames])
    values = np.full((idx[-1] + 1, N_CHANNELS), np.nan)
    values[idx] = [fr.values() for fr in frames]
    return PmuStream(frames[0].pmu_id, values, frame_rate, t0, v_rate)


def write_stream_csv(path, stream: PmuStream) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for k, row in enumerate(stream.values):
            if np.isnan(row).any():
                continue
            t = stream.start_time + k / stream.frame_rate
            w.writerow([f"{t:.6f}", stream.pmu_id] + [repr(float(v)) for v in row])


# -- synthetic data --------------------------------------------------------

DEFAULT_SIGNATURES: dict[int, dict[str, tuple[float, float]]] = {
    # ranges are sampled uniformly per event
    1: {"depth": (0.15, 0.18), "duration": (16.0, 24.0)},
    2: {"rocof": (0.010, 0.012), "duration": (16.0, 24.0)},
    3: {"amplitude": (0.015, 0.017), "freq": (0.4, 1.2), "duration": (16.0, 24.0)},
    4: {"ramp": (0.050, 0.058), "duration": (16.0, 24.0)},
    5: {"depth": (0.10, 0.12), "amplitude": (0.024, 0.028), "freq": (2.0, 3.0),
        "swing": (10.0, 14.0), "period": (10.0, 14.0), "duration": (46.0, 52.0)},
}


# scenes per label: normal-heavy, with the unknown type held out of training
DEFAULT_COUNTS = {0: 40, 1: 12, 2: 12, 3: 12, 4: 12, 5: 8}


@dataclass
class SyntheticConfig:
    frame_rate: float = 30.0
    window_seconds: float = 5.0
    stride_seconds: float = 1.0
    scene_seconds: float = 60.0
    n_pmus: int = 4
    counts: dict[int, int] = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    eval_fraction: float = 0.5
    noise_std: float = 0.001
    ambient_ratio: float = 3.0
    min_overlap_seconds: float = 2.5  # half a window
    v_rate: float = 7200.0
    i_base: float = 400.0
    f_nominal: float = 60.0
    seed: int = 0
    signatures: dict[int, dict[str, tuple[float, float]]] = field(
        default_factory=lambda: {k: dict(v) for k, v in DEFAULT_SIGNATURES.items()}
    )

    def validate(self) -> None:
        if self.frame_rate <= 0:
            raise PmuDataError("frame_rate must be positive")
        if any(n < 0 for n in self.counts.values()):
            raise PmuDataError("counts must be non-negative")
        if any(k not in EVENT_NAMES for k in self.counts):
            raise PmuDataError(f"unknown event types in counts: {sorted(self.counts)}")
        if sum(self.counts.values()) == 0:
            raise EmptyConfigError("configuration requests no scenes")
        if self.scene_seconds < self.window_seconds:
            raise PmuDataError("scene shorter than one window")
        if self.n_pmus < 1:
            raise PmuDataError("need at least one PMU")
        if not 0.0 <= self.eval_fraction <= 1.0:
            raise PmuDataError("eval_fraction must lie in [0, 1]")


@dataclass
class Scene:
    index: int
    label: int
    split: str  # "train" or "eval"
    start: float  # seconds since dataset start
    duration: float
    event_start: float | None = None  # relative to scene start
    event_stop: float | None = None

    def segment_labels(self, window: float, stride: float, min_overlap: float) -> np.ndarray:
        n = int(math.floor((self.duration - window) / stride + 1e-9)) + 1
        out = np.zeros(n, dtype=np.int64)
        if self.label == 0:
            return out
        starts = np.arange(n) * stride
        overlap = np.minimum(starts + window, self.event_stop) - np.maximum(starts, self.event_start)
        out[overlap >= min_overlap - 1e-9] = self.label
        return out


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    streams: list[PmuStream]
    scenes: list[Scene]

    def scene_streams(self, scene: Scene) -> list[PmuStream]:
        return [s.slice_seconds(scene.start, scene.start + scene.duration) for s in self.streams]

    def segment_labels(self, scene: Scene) -> np.ndarray:
        c = self.config
        return scene.segment_labels(c.window_seconds, c.stride_seconds, c.min_overlap_seconds)

    def split(self, name: str) -> list[Scene]:
        return [s for s in self.scenes if s.split == name]

    def label_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for s in self.scenes:
            hist[s.label] = hist.get(s.label, 0) + 1
        return dict(sorted(hist.items()))


def _smooth_noise(rng, n: int, frame_rate: float, corr_seconds: float = 2.0) -> np.ndarray:
    """Approximately unit-variance drift: white noise through two first-order lags."""
    a = math.exp(-1.0 / (corr_seconds * frame_rate))
    warm = int(5 * corr_seconds * frame_rate)
    e = rng.standard_normal(n + warm)
    y = lfilter([1.0 - a], [1.0, -a], lfilter([1.0 - a], [1.0, -a], e))[warm:]
    # stationary variance of the cascade
    var = (1 - a) ** 4 * (1 + a * a) / ((1 - a * a) ** 3)
    return y / math.sqrt(var)


def _edge(t: np.ndarray, rise: float) -> np.ndarray:
    """Smooth 0->1 transition over ``rise`` seconds starting at t = 0."""
    return np.clip(t / rise, 0.0, 1.0) if rise > 0 else (t >= 0).astype(float)


def _draw(rng, spec: dict[str, tuple[float, float]]) -> dict[str, float]:
    return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in sorted(spec.items())}


def _triangle(x: np.ndarray) -> np.ndarray:
    """Unit triangle wave: 0 at integers, 1 at half-integers."""
    return 1.0 - np.abs(2.0 * (x - np.floor(x)) - 1.0)


def event_signature(kind: int, t: np.ndarray, params: dict[str, float], rng) -> tuple[np.ndarray, float]:
    """Deviation from steady state for one event, in per-unit-like units.

    Returns ``(delta, active_seconds)`` where ``delta`` is (len(t), 6) with
    voltages in pu, current relative to its base, frequency in Hz and ROCOF
    in Hz/s. ``t`` is seconds since event onset.

    Window normalization removes constant offsets, so the known types keep a
    steady within-window pattern (a ramp or an oscillation) over their whole
    active span. The unknown type sweeps its strength up and down instead.
    """
    d = np.zeros((t.size, N_CHANNELS))
    dur = params["duration"]
    tt = np.clip(t, 0.0, dur)
    active = (t >= 0) & (t <= dur)
    # ramp from 1 at onset down to 0 at the end of the event
    fade = np.where(active, 1.0 - tt / dur, 0.0)
    env = _edge(t, 0.5) * (1.0 - _edge(t - dur + 0.5, 0.5))
    if kind == 1:
        # sag with slow linear voltage recovery
        d[:, :3] = -params["depth"] * fade[:, None]
        d[:, 3] = 0.5 * params["depth"] * fade
    elif kind == 2:
        # frequency decline at constant ROCOF, then held
        d[:, 4] = -params["rocof"] * tt * (t >= 0)
        d[:, 5] = -params["rocof"] * active
        d[:, :3] = -0.2 * params["rocof"] * (tt * (t >= 0))[:, None]
    elif kind == 3:
        w = 2.0 * math.pi * params["freq"]
        a = params["amplitude"]
        d[:, :3] = (a * env * np.sin(w * t))[:, None]
        d[:, 3] = 3.0 * a * np.sin(w * t + 0.8) * env
        d[:, 4] = 0.5 * a * np.sin(w * t + 1.6) * env
        d[:, 5] = 0.5 * a * w * np.cos(w * t + 1.6) * env
    elif kind == 4:
        # load pickup: current ramps up, then holds
        d[:, 3] = params["ramp"] * tt * (t >= 0)
        d[:, :3] = -0.02 * params["ramp"] * (tt * (t >= 0))[:, None]
    elif kind == 5:
        # composite sag and fast oscillation whose strength swings by a
        # factor of ``swing`` with the given period
        w = 2.0 * math.pi * params["freq"]
        phase = rng.uniform()
        gain = params["swing"] ** (_triangle(t / params["period"] + phase) - 1.0) * env
        sag = params["depth"] * gain * _triangle(t / 3.0)
        osc = params["amplitude"] * gain * np.sin(w * t)
        d[:, :3] = (-sag + osc)[:, None]
        d[:, 3] = 0.5 * sag + 2.0 * osc
        d[:, 4] = 0.3 * osc
        d[:, 5] = 0.3 * params["amplitude"] * gain * w * np.cos(w * t)
    else:
        raise PmuDataError(f"no signature for event type {kind}")
    return d, dur


def generate_synthetic(config: SyntheticConfig) -> SyntheticDataset:
    """Deterministic labeled dataset of back-to-back scenes.

    Each scene is ``scene_seconds`` long, spans all PMUs and carries at most
    one event. Training scenes come first in time, evaluation scenes after,
    so the splits are disjoint by window start. Unknown-type scenes are
    always placed in the evaluation split.
    """
    config.validate()
    rng = make_rng(config.seed)
    fr = config.frame_rate
    n_scene = int(round(config.scene_seconds * fr))

    train, evaluate = [], []
    for kind in sorted(config.counts):
        n = config.counts[kind]
        n_eval = n if kind == UNKNOWN_TYPE else int(round(n * config.eval_fraction))
        train += [kind] * (n - n_eval)
        evaluate += [kind] * n_eval
    order_train = rng.permutation(len(train))
    order_eval = rng.permutation(len(evaluate))
    plan = [(train[k], "train") for k in order_train] + [(evaluate[k], "eval") for k in order_eval]

    P = config.n_pmus
    total = n_scene * len(plan)
    t_scene = np.arange(n_scene) / fr
    sig = config.noise_std

    # steady state per PMU
    v_levels = config.v_rate * (1.0 + rng.uniform(-0.02, 0.02, size=(P, 3)))
    i_levels = config.i_base * rng.uniform(0.8, 1.2, size=P)
    amb = config.ambient_ratio * sig
    # interconnection-wide frequency drift; ROCOF follows its derivative
    f_amb = 3.0 * amb * _smooth_noise(rng, total, fr, 3.0)
    df_amb = np.gradient(f_amb) * fr

    dev = np.zeros((P, total, N_CHANNELS))
    scenes = []
    for s_idx, (kind, split) in enumerate(plan):
        a = s_idx * n_scene
        scene = Scene(s_idx, kind, split, s_idx * config.scene_seconds, config.scene_seconds)
        if kind != 0:
            params = _draw(rng, config.signatures[kind])
            span = params["duration"]
            lo = config.window_seconds
            hi = max(lo, config.scene_seconds - config.window_seconds - span)
            onset = float(rng.uniform(lo, hi))
            # shared event; each PMU sees it attenuated by electrical distance
            atten = rng.uniform(0.85, 1.0, size=P)
            delta, active = event_signature(kind, t_scene - onset, params, rng)
            scene.event_start = onset
            scene.event_stop = min(onset + active, config.scene_seconds)
            dev[:, a:a + n_scene, :] += atten[:, None, None] * delta[None]
        scenes.append(scene)

    streams = []
    for p in range(P):
        x = np.empty((total, N_CHANNELS))
        v_amb = amb * _smooth_noise(rng, total, fr)
        i_amb = amb * _smooth_noise(rng, total, fr) - 0.5 * v_amb
        white = sig * rng.standard_normal((total, N_CHANNELS))
        x[:, :3] = v_levels[p] * (1.0 + dev[p, :, :3] + v_amb[:, None] + white[:, :3])
        x[:, 3] = i_levels[p] * (1.0 + dev[p, :, 3] + i_amb + white[:, 3])
        x[:, 4] = config.f_nominal + dev[p, :, 4] + f_amb + white[:, 4]
        x[:, 5] = dev[p, :, 5] + df_amb + 5.0 * white[:, 5]
        streams.append(PmuStream(p, x, fr, 0.0, config.v_rate))
    return SyntheticDataset(config, streams, scenes)


def write_dataset(dataset: SyntheticDataset, out_dir) -> list[Path]:
    """One CSV per PMU, ``labels.csv`` of per-segment truth and ``scenes.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in dataset.streams:
        path = out / f"pmu_{s.pmu_id:03d}.csv"
        write_stream_csv(path, s)
        written.append(path)
    c = dataset.config
    with (out / "labels.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pmu", "segment_start_s", "label"])
        for scene in dataset.scenes:
            labels = dataset.segment_labels(scene)
            for p in range(c.n_pmus):
                for k, lab in enumerate(labels):
                    w.writerow([p, f"{scene.start + k * c.stride_seconds:.3f}", int(lab)])
    written.append(out / "labels.csv")
    with (out / "scenes.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene", "start_s", "duration_s", "label", "split", "event_start_s", "event_stop_s"])
        for sc in dataset.scenes:
            w.writerow([sc.index, f"{sc.start:.3f}", f"{sc.duration:.3f}", sc.label, sc.split,
                        "" if sc.event_start is None else f"{sc.event_start:.6f}",
                        "" if sc.event_stop is None else f"{sc.event_stop:.6f}"])
    written.append(out / "scenes.csv")
    with (out / "dataset.txt").open("w") as fh:
        fh.write(f"frame_rate = {c.frame_rate!r}\n")
        fh.write(f"v_rate = {c.v_rate!r}\n")
        fh.write(f"window_seconds = {c.window_seconds!r}\n")
        fh.write(f"stride_seconds = {c.stride_seconds!r}\n")
        fh.write(f"min_overlap_seconds = {c.min_overlap_seconds!r}\n")
        fh.write(f"seed = {c.seed}\n")
    written.append(out / "dataset.txt")
    return written


def read_dataset(data_dir) -> SyntheticDataset:
    """Load a directory written by :func:`write_dataset`."""
    d = Path(data_dir)
    meta = {}
    for line in (d / "dataset.txt").read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            meta[k.strip()] = float(v)
    fr = meta["frame_rate"]
    streams = []
    for path in sorted(d.glob("pmu_*.csv")):
        for pmu, frames in load_csv_stream(path, fr).items():
            streams.append(frames_to_stream(frames, fr, meta["v_rate"]))
    scenes = []
    with (d / "scenes.csv").open(newline="") as fh:
        for row in csv.DictReader(fh):
            scenes.append(Scene(
                int(row["scene"]), int(row["label"]), row["split"],
                float(row["start_s"]), float(row["duration_s"]),
                float(row["event_start_s"]) if row["event_start_s"] else None,
                float(row["event_stop_s"]) if row["event_stop_s"] else None,
            ))
    cfg = SyntheticConfig(
        frame_rate=fr, v_rate=meta["v_rate"], window_seconds=meta["window_seconds"],
        stride_seconds=meta["stride_seconds"], min_overlap_seconds=meta["min_overlap_seconds"],
        n_pmus=len(streams), scene_seconds=scenes[0].duration if scenes else 60.0,
        counts={k: sum(s.label == k for s in scenes) for k in sorted({s.label for s in scenes})},
        seed=int(meta.get("seed", 0)),
    )
    return SyntheticDataset(cfg, streams, scenes)


def iter_windows(values: np.ndarray, n: int, step: int) -> Iterable[np.ndarray]:
    for a in range(0, values.shape[0] - n + 1, step):
        yield values[a:a + n]
