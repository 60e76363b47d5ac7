"""Small MLP mapping per-window error features to known event types 0-4."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .nn import DenseLayer

N_CLASSES = 5


class ContractError(ValueError):
    pass


@dataclass
class ClassifierConfig:
    hidden: tuple[int, ...] = (32, 32)
    lr: float = 1e-3
    epochs: int = 300
    batch_size: int = 128
    seed: int = 0
    class_weighting: bool = True
    weight_power: float = 0.5  # 1 = inverse frequency, 0 = uniform


@dataclass
class MlpClassifier:
    layers: list[DenseLayer]
    # features are log1p-compressed then standardized with these
    feat_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    feat_std: np.ndarray = field(default_factory=lambda: np.ones(2))

    @property
    def n_features(self) -> int:
        return self.layers[0].fan_in

    def transform(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64).reshape(-1, self.n_features)
        return (np.sign(f) * np.log1p(np.abs(f)) - self.feat_mean) / self.feat_std

    def logits(self, features) -> np.ndarray:
        return nn.forward(self.layers, self.transform(features))[-1]

    def predict(self, features) -> np.ndarray:
        # argmax returns the first maximum, i.e. the lowest label on ties
        return np.argmax(self.logits(features), axis=1).astype(np.int64)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def label_from_logits(logits: Sequence[float]) -> int:
    return int(np.argmax(np.asarray(logits)))


def train_classifier(features, labels, config: ClassifierConfig | None = None) -> MlpClassifier:
    """Weighted softmax cross-entropy with Adam. Labels must lie in 0-4."""
    cfg = config or ClassifierConfig()
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != y.shape[0] or y.size == 0:
        raise ValueError("features and labels must be non-empty and equally long")
    if y.min() < 0 or y.max() >= N_CLASSES:
        raise ContractError(f"training labels must lie in 0..{N_CLASSES - 1}; unknown-type samples are not allowed")
    rng = nn.make_rng(cfg.seed)
    layers = nn.build_stack([x.shape[1], *cfg.hidden, N_CLASSES],
                            ["relu"] * len(cfg.hidden) + ["linear"], rng)
    model = MlpClassifier(layers)
    t = np.sign(x) * np.log1p(np.abs(x))
    model.feat_mean = t.mean(axis=0)
    sd = t.std(axis=0)
    model.feat_std = np.where(sd > 1e-12, sd, 1.0)
    xs = model.transform(x)

    counts = np.bincount(y, minlength=N_CLASSES).astype(np.float64)
    if cfg.class_weighting:
        present = counts > 0
        cw = np.zeros(N_CLASSES)
        cw[present] = (y.size / (present.sum() * counts[present])) ** cfg.weight_power
    else:
        cw = np.ones(N_CLASSES)
    sw = cw[y]

    params = nn.parameters(layers)
    state = nn.AdamState.zeros_like(params)
    onehot = np.eye(N_CLASSES)[y]
    for _ in range(cfg.epochs):
        order = rng.permutation(y.size)
        for a in range(0, y.size, cfg.batch_size):
            idx = order[a:a + cfg.batch_size]
            acts = nn.forward(layers, xs[idx])
            p = softmax(acts[-1])
            w = sw[idx][:, None]
            g = w * (p - onehot[idx]) / w.sum()
            grads, _ = nn.backward(layers, acts, g)
            nn.adam_step(params, nn.flatten_grads(grads), state, cfg.lr)
    return model


def classify(model: MlpClassifier, errors) -> int:
    return int(model.predict(errors)[0])


def save_classifier(model: MlpClassifier, path) -> None:
    meta = {"kind": "classifier", "n_classes": N_CLASSES, "n_features": model.n_features}
    Path(path).write_bytes(nn.dump_checkpoint(
        {"mlp": model.layers}, meta, {"feat_mean": model.feat_mean, "feat_std": model.feat_std}))


def load_classifier(path) -> MlpClassifier:
    sections, meta, arrays = nn.load_checkpoint(Path(path).read_bytes())
    if meta.get("kind") != "classifier" or meta.get("n_classes") != N_CLASSES:
        raise ValueError(f"{path} is not a {N_CLASSES}-class classifier checkpoint")
    return MlpClassifier(sections["mlp"], arrays["feat_mean"], arrays["feat_std"])
