"""VAE-GAN over flattened PMU windows, with hand-written gradients.

The encoder is a relu trunk feeding two linear heads (mean and log-sigma),
the decoder maps a latent code back to a window, and the discriminator ends
in a sigmoid. Windows are divided column-wise by ``channel_scale`` (fitted on
the normal training data) before entering the network, so all six channels
contribute to the errors on a comparable footing.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import nn
from .data import N_CHANNELS, PmuWindow
from .nn import DenseLayer, DimensionError, TrainingDivergenceError

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
LOGSIG_MIN, LOGSIG_MAX = -6.0, 4.0
INFER_CHUNK = 64


class EmptyInputError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, msg: str):
        super().__init__(f"epoch {epoch}: {msg}")
        self.epoch = epoch


class ErrorPair(NamedTuple):
    e_recon: float
    e_d: float


@dataclass
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.05

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LatentSample:
    mu: np.ndarray
    sigma: np.ndarray
    noise: np.ndarray
    z: np.ndarray


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    rel_tolerance: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class VaeGanModel:
    encoder: list[DenseLayer]  # trunk, relu
    mu_head: DenseLayer
    logsig_head: DenseLayer
    decoder: list[DenseLayer]
    discriminator: list[DenseLayer]
    window_samples: int
    channel_scale: np.ndarray = field(default_factory=lambda: np.ones(N_CHANNELS))
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    @property
    def latent_dim(self) -> int:
        return self.mu_head.fan_out

    @property
    def input_dim(self) -> int:
        return self.window_samples * N_CHANNELS

    @classmethod
    def create(cls, window_samples: int = 150, hidden: Sequence[int] = (256, 64),
               latent_dim: int = 16, disc_hidden: Sequence[int] = (256, 64),
               activation: str = "relu", seed: int = 0,
               weights: LossWeights | None = None) -> "VaeGanModel":
        rng = nn.make_rng(seed)
        d = window_samples * N_CHANNELS
        enc = nn.build_stack([d, *hidden], [activation] * len(hidden), rng)
        trunk_out = hidden[-1] if hidden else d
        mu_head = DenseLayer.init(trunk_out, latent_dim, "linear", rng)
        logsig_head = DenseLayer.init(trunk_out, latent_dim, "linear", rng)
        dec_sizes = [latent_dim, *reversed(hidden), d]
        dec = nn.build_stack(dec_sizes, [activation] * len(hidden) + ["linear"], rng)
        disc_sizes = [d, *disc_hidden, 1]
        disc = nn.build_stack(disc_sizes, [activation] * len(disc_hidden) + ["sigmoid"], rng)
        return cls(enc, mu_head, logsig_head, dec, disc, window_samples,
                   weights=weights or LossWeights(), seed=seed)

    # parameter groups, in a fixed order
    def generator_params(self) -> list[np.ndarray]:
        return (nn.parameters(self.encoder) + nn.parameters([self.mu_head, self.logsig_head])
                + nn.parameters(self.decoder))

    def discriminator_params(self) -> list[np.ndarray]:
        return nn.parameters(self.discriminator)

    def copy(self) -> "VaeGanModel":
        return VaeGanModel(
            [l.copy() for l in self.encoder], self.mu_head.copy(), self.logsig_head.copy(),
            [l.copy() for l in self.decoder], [l.copy() for l in self.discriminator],
            self.window_samples, self.channel_scale.copy(),
            LossWeights(self.weights.lambda1, self.weights.lambda2), self.seed,
        )

    def prepare(self, windows: np.ndarray) -> np.ndarray:
        """(B, N, 6) or (N, 6) normalized windows -> scaled flat rows."""
        w = np.asarray(windows, dtype=np.float64)
        if w.ndim == 2:
            w = w[None]
        if w.shape[1:] != (self.window_samples, N_CHANNELS):
            raise DimensionError(
                f"expected windows of shape ({self.window_samples}, {N_CHANNELS}), got {w.shape[1:]}"
            )
        return (w / self.channel_scale).reshape(w.shape[0], -1)

    def fit_scale(self, windows: np.ndarray) -> None:
        rms = np.sqrt(np.mean(np.asarray(windows) ** 2, axis=(0, 1)))
        self.channel_scale = np.where(rms > 1e-12, rms, 1.0)


# -- losses ----------------------------------------------------------------

def _per_window(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape[0], -1) if a.ndim > 1 else a.reshape(1, -1)


def reconstruction_loss(m: np.ndarray, m_hat: np.ndarray) -> float:
    """Batch mean of per-window MSE plus the batch max of per-window max |error|.

    The leading axis is the batch; a 1-D input is treated as a batch of one.
    """
    m = _per_window(m)
    m_hat = _per_window(m_hat)
    if m.shape != m_hat.shape:
        raise DimensionError(f"{m.shape} vs {m_hat.shape}")
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise EmptyInputError("empty batch")
    diff = m_hat - m
    return float(np.mean(diff * diff) + np.max(np.abs(diff)))


def reconstruction_grad(m: np.ndarray, m_hat: np.ndarray) -> np.ndarray:
    """Gradient of :func:`reconstruction_loss` with respect to ``m_hat``.

    The max term contributes a subgradient at the first arg-max entry.
    """
    diff = np.asarray(m_hat, dtype=np.float64) - np.asarray(m, dtype=np.float64)
    g = 2.0 * diff / diff.size
    flat = np.abs(diff).reshape(-1)
    k = int(np.argmax(flat))
    g.reshape(-1)[k] += np.sign(diff.reshape(-1)[k])
    return g


def window_errors(m: np.ndarray, m_hat: np.ndarray) -> np.ndarray:
    """Per-window MSE + max |error| (the reconstruction loss at batch size one)."""
    diff = _per_window(m_hat) - _per_window(m)
    return np.mean(diff * diff, axis=1) + np.max(np.abs(diff), axis=1)


def kl_loss(mu: np.ndarray, sigma: np.ndarray) -> float:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over latent dims; batch-averaged if 2-D."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    terms = 1.0 + np.log(sigma * sigma) - mu * mu - sigma * sigma
    per = -0.5 * terms.sum(axis=-1)
    return float(np.mean(per))


def _clamp_prob(p):
    return np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)


def adversarial_loss(d_fake) -> float:
    return float(np.mean(-np.log(_clamp_prob(d_fake))))


def discriminator_loss(d_real, d_fake) -> float:
    return float(np.mean(-np.log(_clamp_prob(d_real)))
                 + np.mean(-np.log(1.0 - _clamp_prob(d_fake))))


def total_generator_loss(recon: float, kl: float, adv: float, weights: LossWeights) -> float:
    return recon + weights.lambda1 * kl + weights.lambda2 * adv


# -- model pieces ----------------------------------------------------------

def _encode_flat(model: VaeGanModel, x: np.ndarray):
    acts = nn.forward(model.encoder, x)
    h = acts[-1]
    mu = nn.forward([model.mu_head], h)[-1]
    s_raw = nn.forward([model.logsig_head], h)[-1]
    s = np.clip(s_raw, LOGSIG_MIN, LOGSIG_MAX)
    return acts, mu, s_raw, s


def encode(model: VaeGanModel, window_flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard deviation of q(z | window) for already-scaled flat input."""
    x = np.asarray(window_flat, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise DimensionError(f"expected {model.input_dim} inputs, got {x.shape[-1]}")
    _, mu, _, s = _encode_flat(model, x)
    sigma = np.exp(s)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise FloatingPointError("encoder produced non-finite output")
    return mu, sigma


def sample_latent(mu, sigma, noise) -> np.ndarray:
    mu, sigma, noise = (np.asarray(a, dtype=np.float64) for a in (mu, sigma, noise))
    if not (mu.shape == sigma.shape == noise.shape):
        raise DimensionError(f"latent shapes differ: {mu.shape}, {sigma.shape}, {noise.shape}")
    return mu + sigma * noise


def decode(model: VaeGanModel, z: np.ndarray) -> np.ndarray:
    return nn.forward(model.decoder, z)[-1]


def discriminate(model: VaeGanModel, x: np.ndarray) -> np.ndarray:
    return nn.forward(model.discriminator, x)[-1][..., 0]


def _prob_grad(p: np.ndarray, coef: np.ndarray) -> np.ndarray:
    # d/dp of -log(clamp(p)) style terms vanishes where the clamp is active
    active = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    return np.where(active, coef, 0.0)


@dataclass
class LossParts:
    recon: float
    kl: float
    adv: float
    total: float


def generator_loss_and_grads(model: VaeGanModel, x: np.ndarray, noise: np.ndarray):
    """Total encoder/decoder loss on a scaled batch and its gradients.

    Returns ``(LossParts, grads)`` with ``grads`` aligned to
    ``model.generator_params()``. Discriminator parameters are held fixed.
    """
    B = x.shape[0]
    w = model.weights
    enc_acts, mu, s_raw, s = _encode_flat(model, x)
    sigma = np.exp(s)
    z = mu + sigma * noise
    dec_acts = nn.forward(model.decoder, z)
    x_hat = dec_acts[-1]
    disc_acts = nn.forward(model.discriminator, x_hat)
    p = disc_acts[-1]

    recon = reconstruction_loss(x, x_hat)
    kl = kl_loss(mu, sigma)
    adv = adversarial_loss(p)
    total = total_generator_loss(recon, kl, adv, w)

    g_xhat = reconstruction_grad(x, x_hat)
    g_p = _prob_grad(p, -1.0 / (B * np.clip(p, PROB_EPS, None)))
    _, g_xhat_adv = nn.backward(model.discriminator, disc_acts, g_p)
    g_xhat = g_xhat + w.lambda2 * g_xhat_adv

    dec_grads, g_z = nn.backward(model.decoder, dec_acts, g_xhat)
    g_mu = g_z + w.lambda1 * mu / B
    g_s = g_z * sigma * noise + w.lambda1 * (sigma * sigma - 1.0) / B
    g_s = np.where((s_raw > LOGSIG_MIN) & (s_raw < LOGSIG_MAX), g_s, 0.0)

    h = enc_acts[-1]
    mu_grads, g_h1 = nn.backward([model.mu_head], [h, mu], g_mu)
    ls_grads, g_h2 = nn.backward([model.logsig_head], [h, s_raw], g_s)
    enc_grads, _ = nn.backward(model.encoder, enc_acts, g_h1 + g_h2)

    grads = (nn.flatten_grads(enc_grads) + nn.flatten_grads(mu_grads)
             + nn.flatten_grads(ls_grads) + nn.flatten_grads(dec_grads))
    return LossParts(recon, kl, adv, total), grads


def discriminator_loss_and_grads(model: VaeGanModel, x: np.ndarray, x_fake: np.ndarray):
    """Discriminator loss on real ``x`` versus (fixed) reconstructions ``x_fake``."""
    B = x.shape[0]
    real_acts = nn.forward(model.discriminator, x)
    fake_acts = nn.forward(model.discriminator, x_fake)
    pr, pf = real_acts[-1], fake_acts[-1]
    loss = discriminator_loss(pr, pf)
    g_r = _prob_grad(pr, -1.0 / (B * np.clip(pr, PROB_EPS, None)))
    g_f = _prob_grad(pf, 1.0 / (B * np.clip(1.0 - pf, PROB_EPS, None)))
    gr, _ = nn.backward(model.discriminator, real_acts, g_r)
    gf, _ = nn.backward(model.discriminator, fake_acts, g_f)
    grads = [a + b for a, b in zip(nn.flatten_grads(gr), nn.flatten_grads(gf))]
    return loss, grads


def reconstruct_flat(model: VaeGanModel, x: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
    _, mu, _, s = _encode_flat(model, x)
    z = mu if noise is None else mu + np.exp(s) * noise
    return decode(model, z)


# -- training --------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    recon: float
    kl: float
    adv: float
    disc: float
    val_recon: float


def _val_recon(model: VaeGanModel, x_val: np.ndarray) -> float:
    errs = [window_errors(x_val[a:a + INFER_CHUNK], reconstruct_flat(model, x_val[a:a + INFER_CHUNK]))
            for a in range(0, x_val.shape[0], INFER_CHUNK)]
    return float(np.mean(np.concatenate(errs)))


def train(model: VaeGanModel, normal_windows: np.ndarray, config: TrainConfig,
          fit_scale: bool = True) -> tuple[VaeGanModel, list[EpochRecord]]:
    """Alternating discriminator / encoder-decoder updates with early stopping.

    ``normal_windows`` is (n, N, 6) normalized non-event data. The model is
    updated in place; the parameters with the best validation reconstruction
    error are restored before returning.
    """
    windows = np.asarray(normal_windows, dtype=np.float64)
    rng = nn.make_rng(config.seed)
    n = windows.shape[0]
    n_val = int(round(n * config.val_fraction))
    if n_val < 1 and config.val_fraction > 0:
        n_val = 1
    perm = rng.permutation(n)
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    if train_idx.size < config.batch_size:
        raise EmptyInputError(
            f"need at least one full batch ({config.batch_size}) of training windows, got {train_idx.size}"
        )
    if fit_scale:
        model.fit_scale(windows[train_idx])
    x_all = model.prepare(windows)
    x_train = x_all[train_idx]
    x_val = x_all[val_idx] if n_val else x_train

    g_params = model.generator_params()
    d_params = model.discriminator_params()
    g_state = nn.AdamState.zeros_like(g_params)
    d_state = nn.AdamState.zeros_like(d_params)

    history: list[EpochRecord] = []
    best = np.inf
    best_model = model.copy()
    stale = 0
    L = model.latent_dim
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(x_train.shape[0])
        sums = np.zeros(4)
        batches = 0
        for a in range(0, order.size, config.batch_size):
            xb = x_train[order[a:a + config.batch_size]]
            noise = rng.standard_normal((xb.shape[0], L))
            # discriminator step, encoder/decoder frozen
            x_fake = reconstruct_flat(model, xb, noise)
            d_loss, d_grads = discriminator_loss_and_grads(model, xb, x_fake)
            # encoder/decoder step, discriminator frozen
            parts, g_grads = generator_loss_and_grads(model, xb, noise)
            if not (np.isfinite(d_loss) and np.isfinite(parts.total)):
                raise TrainingError(epoch, "non-finite loss")
            try:
                nn.adam_step(d_params, d_grads, d_state, config.lr)
                nn.adam_step(g_params, g_grads, g_state, config.lr)
            except TrainingDivergenceError as exc:
                raise TrainingError(epoch, str(exc)) from exc
            sums += (parts.recon, parts.kl, parts.adv, d_loss)
            batches += 1
        val = _val_recon(model, x_val)
        if not np.isfinite(val):
            raise TrainingError(epoch, "non-finite validation loss")
        means = sums / batches
        history.append(EpochRecord(epoch, *means, val))
        log.debug("epoch %d recon %.5f kl %.5f adv %.5f disc %.5f val %.5f", epoch, *means, val)
        if val < best - max(config.rel_tolerance * best, 1e-12) or not np.isfinite(best):
            best = val
            best_model = model.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    _assign(model, best_model)
    return model, history


def _assign(dst: VaeGanModel, src: VaeGanModel) -> None:
    for p, q in zip(dst.generator_params() + dst.discriminator_params(),
                    src.generator_params() + src.discriminator_params()):
        p[...] = q


def write_history(path, history: Sequence[EpochRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "recon", "kl", "adv", "disc", "val_recon"])
        for r in history:
            w.writerow([r.epoch] + [repr(float(v)) for v in (r.recon, r.kl, r.adv, r.disc, r.val_recon)])


# -- inference -------------------------------------------------------------

def errors_batch(model: VaeGanModel, windows: np.ndarray) -> np.ndarray:
    """(n, 2) array of (e_recon, e_d) for normalized windows (n, N, 6).

    Uses the posterior mean as the latent code. Work is done in fixed-size
    chunks so results do not depend on how callers batch their windows.
    """
    x = model.prepare(windows)
    out = np.empty((x.shape[0], 2))
    for a in range(0, x.shape[0], INFER_CHUNK):
        xb = x[a:a + INFER_CHUNK]
        x_hat = reconstruct_flat(model, xb)
        out[a:a + INFER_CHUNK, 0] = window_errors(xb, x_hat)
        out[a:a + INFER_CHUNK, 1] = -np.log(_clamp_prob(discriminate(model, x_hat)))
    return out


def latent_means(model: VaeGanModel, windows: np.ndarray) -> np.ndarray:
    x = model.prepare(windows)
    return np.concatenate([_encode_flat(model, x[a:a + INFER_CHUNK])[1]
                           for a in range(0, x.shape[0], INFER_CHUNK)])


def infer_errors(model: VaeGanModel, window: PmuWindow | np.ndarray) -> ErrorPair:
    values = window.values if isinstance(window, PmuWindow) else window
    e = errors_batch(model, np.asarray(values)[None])[0]
    return ErrorPair(float(e[0]), float(e[1]))


# -- checkpoints -----------------------------------------------------------

def save_model(model: VaeGanModel, path) -> None:
    meta = {
        "kind": "vaegan",
        "latent_dim": model.latent_dim,
        "input_dim": model.input_dim,
        "window_samples": model.window_samples,
        "lambda1": model.weights.lambda1,
        "lambda2": model.weights.lambda2,
        "seed": model.seed,
    }
    sections = {
        "encoder": model.encoder,
        "mu_head": [model.mu_head],
        "logsig_head": [model.logsig_head],
        "decoder": model.decoder,
        "discriminator": model.discriminator,
    }
    Path(path).write_bytes(nn.dump_checkpoint(sections, meta, {"channel_scale": model.channel_scale}))


def load_model(path) -> VaeGanModel:
    sections, meta, arrays = nn.load_checkpoint(Path(path).read_bytes())
    if meta.get("kind") != "vaegan":
        raise ValueError(f"{path} is not a VAE-GAN checkpoint")
    return VaeGanModel(
        sections["encoder"], sections["mu_head"][0], sections["logsig_head"][0],
        sections["decoder"], sections["discriminator"], int(meta["window_samples"]),
        arrays["channel_scale"], LossWeights(meta["lambda1"], meta["lambda2"]), int(meta["seed"]),
    )
