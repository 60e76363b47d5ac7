"""Fit every component from a labeled dataset and evaluate scenes end to end."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import decision
from .classifier import ClassifierConfig, MlpClassifier, train_classifier
from .data import KNOWN_TYPES, Scene, SyntheticDataset
from .decision import ConvexHullRegion, ThresholdRule
from .envelope import EnvelopeConfig, EnvelopeDetector, calibrate_envelope
from .evaluation import SceneOutputs
from .nn import make_rng
from .vaegan import TrainConfig, VaeGanModel, train
from .windows import (
    SlidingWindowConfig,
    build_matrices,
    compute_errors,
    normalized_windows,
    segment_stream,
)

log = logging.getLogger(__name__)


@dataclass
class SystemConfig:
    hidden: tuple[int, ...] = (256, 64)
    latent_dim: int = 16
    disc_hidden: tuple[int, ...] = (256, 64)
    model_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eta: int = 10
    hull_inflation: float = 1.0
    calibration_fraction: float = 0.3
    threshold_grid_size: int = 400
    threshold_lambda_recon: float = 1.0
    threshold_lambda_d: float = 1.0
    envelope_window_len: int = 30
    envelope_margin: float = 1.1
    envelope_channels: tuple[bool, ...] = (True,) * 6
    max_train_windows: int | None = None


@dataclass
class FittedSystem:
    model: VaeGanModel
    classifier: MlpClassifier
    hull: ConvexHullRegion
    rule: ThresholdRule
    envelope: EnvelopeDetector
    window: SlidingWindowConfig
    eta: int
    history: list = field(default_factory=list)

    def detector(self, name: str):
        if name == "hull":
            return self.hull
        if name == "threshold":
            return self.rule
        if name == "envelope":
            return self.envelope
        raise ValueError(f"unknown decision rule {name!r}")


def window_config_for(dataset: SyntheticDataset) -> SlidingWindowConfig:
    c = dataset.config
    return SlidingWindowConfig(c.window_seconds, c.stride_seconds, c.frame_rate)


def scene_windows(dataset: SyntheticDataset, scene: Scene, wcfg: SlidingWindowConfig) -> np.ndarray:
    """Normalized windows (P, S, N, 6) of one scene."""
    seg = segment_stream(dataset.scene_streams(scene), wcfg)
    return normalized_windows(seg)


def _stack(scenes, dataset, wcfg):
    wins, labels = [], []
    for sc in scenes:
        w = scene_windows(dataset, sc, wcfg)
        lab = dataset.segment_labels(sc)
        P, S = w.shape[:2]
        wins.append(w.reshape(P * S, *w.shape[2:]))
        labels.append(np.tile(lab, P))
    if not wins:
        return np.empty((0,)), np.empty((0,), dtype=np.int64)
    return np.concatenate(wins), np.concatenate(labels)


@dataclass
class SceneSplit:
    vae: list[Scene]
    calibration: list[Scene]
    events: list[Scene]


def split_training_scenes(dataset: SyntheticDataset, config: SystemConfig) -> SceneSplit:
    """Partition training scenes into VAE-GAN, calibration and known-event sets.

    Normal training scenes are split: most feed the VAE-GAN, the remainder
    (never seen by it) provides the normal points for the hull, the
    classifier's class 0 and threshold tuning. Known-event training scenes
    provide the classifier's classes 1-4.
    """
    rng = make_rng(config.train.seed + 7919)
    train_scenes = dataset.split("train")
    normal = [s for s in train_scenes if s.label == 0]
    events = [s for s in train_scenes if s.label in KNOWN_TYPES]
    if len(normal) < 2:
        raise ValueError("need at least two normal training scenes")
    order = rng.permutation(len(normal))
    n_cal = min(len(normal) - 1, max(1, int(round(len(normal) * config.calibration_fraction))))
    cal = [normal[k] for k in sorted(order[:n_cal])]
    vae = [normal[k] for k in sorted(order[n_cal:])]
    return SceneSplit(vae, cal, events)


def train_vaegan_stage(dataset: SyntheticDataset, config: SystemConfig):
    wcfg = window_config_for(dataset)
    split = split_training_scenes(dataset, config)
    x_vae, _ = _stack(split.vae, dataset, wcfg)
    if config.max_train_windows and x_vae.shape[0] > config.max_train_windows:
        rng = make_rng(config.train.seed + 104729)
        x_vae = x_vae[np.sort(rng.choice(x_vae.shape[0], config.max_train_windows, replace=False))]
    model = VaeGanModel.create(wcfg.window_frames, config.hidden, config.latent_dim, config.disc_hidden,
                               seed=config.model_seed, weights=config.train.weights)
    log.info("training VAE-GAN on %d normal windows", x_vae.shape[0])
    return train(model, x_vae, config.train)


@dataclass
class CalibrationData:
    windows: np.ndarray  # normal calibration windows (n, N, 6)
    normal_errors: np.ndarray  # (n, 2)
    event_errors: np.ndarray  # (m, 2) every window of the known-event scenes
    event_labels: np.ndarray  # (m,) in 0..4

    def features(self) -> tuple[np.ndarray, np.ndarray]:
        feats = np.concatenate([self.normal_errors, self.event_errors])
        labels = np.concatenate([np.zeros(self.normal_errors.shape[0], dtype=np.int64), self.event_labels])
        return feats, labels


def calibration_data(model: VaeGanModel, dataset: SyntheticDataset, config: SystemConfig,
                     threads: int = 1) -> CalibrationData:
    wcfg = window_config_for(dataset)
    split = split_training_scenes(dataset, config)
    x_cal, _ = _stack(split.calibration, dataset, wcfg)
    e_cal = compute_errors(model, x_cal[None], threads)[0]
    x_ev, y_ev = _stack(split.events, dataset, wcfg)
    if x_ev.shape[0]:
        e_ev = compute_errors(model, x_ev[None], threads)[0]
    else:
        e_ev = np.empty((0, 2))
        y_ev = np.empty((0,), dtype=np.int64)
    return CalibrationData(x_cal, e_cal, e_ev, y_ev.astype(np.int64))


def fit_classifier_stage(cal: CalibrationData, config: SystemConfig) -> MlpClassifier:
    feats, labels = cal.features()
    return train_classifier(feats, labels, config.classifier)


def tune_stage(cal: CalibrationData, config: SystemConfig, frame_rate: float):
    """Hull, tuned threshold rule and calibrated envelope from calibration data."""
    hull = decision.build_hull(cal.normal_errors, config.hull_inflation)
    feats, labels = cal.features()
    rule = ThresholdRule(config.threshold_lambda_recon, config.threshold_lambda_d, 0.0)
    if np.unique(labels > 0).size == 2:
        scores = rule.score(feats)
        grid = np.linspace(0.0, float(np.quantile(scores, 0.99)), config.threshold_grid_size)
        rule.eta1, _ = decision.tune_threshold(feats, labels, rule, grid)
    else:
        rule.eta1 = float(rule.score(cal.normal_errors).max())
    env = EnvelopeConfig(window_len=config.envelope_window_len, channels=tuple(config.envelope_channels),
                         period=1.0 / frame_rate)
    env = calibrate_envelope(cal.windows, env, config.envelope_margin)
    return hull, rule, EnvelopeDetector(env)


def fit_system(dataset: SyntheticDataset, config: SystemConfig | None = None,
               threads: int = 1) -> FittedSystem:
    """Train the VAE-GAN on normal training scenes, then calibrate the rest."""
    cfg = config or SystemConfig()
    wcfg = window_config_for(dataset)
    model, history = train_vaegan_stage(dataset, cfg)
    cal = calibration_data(model, dataset, cfg, threads)
    clf = fit_classifier_stage(cal, cfg)
    hull, rule, env = tune_stage(cal, cfg, wcfg.frame_rate)
    return FittedSystem(model, clf, hull, rule, env, wcfg, cfg.eta, history)


def scene_outputs(system: FittedSystem, dataset: SyntheticDataset, scenes: Sequence[Scene],
                  rule: str = "hull", threads: int = 1) -> list[SceneOutputs]:
    detector = system.detector(rule)
    out = []
    for sc in scenes:
        w = scene_windows(dataset, sc, system.window)
        e = compute_errors(system.model, w, threads)
        det, cls = build_matrices(e, detector, system.classifier, windows=w)
        out.append(SceneOutputs(sc.label, dataset.segment_labels(sc), det.values, cls.values))
    return out
