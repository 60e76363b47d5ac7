import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pmufusion import nn, vaegan
from pmufusion.data import PmuWindow, normalize_values
from pmufusion.vaegan import (
    LossWeights,
    TrainConfig,
    VaeGanModel,
    adversarial_loss,
    discriminator_loss,
    encode,
    infer_errors,
    kl_loss,
    reconstruction_loss,
    sample_latent,
    total_generator_loss,
)

finite = st.floats(-5, 5, allow_nan=False)


def tiny_model(seed=0, latent=4, hidden=(8,), samples=2):
    return VaeGanModel.create(samples, hidden, latent, hidden, seed=seed)


# -- encoder / latent --------------------------------------------------------

def test_zero_weight_encoder_returns_head_biases():
    m = tiny_model()
    for layer in m.encoder + [m.mu_head, m.logsig_head]:
        layer.weights[:] = 0.0
    m.mu_head.bias[:] = [0.1, -0.2, 0.3, 0.0]
    m.logsig_head.bias[:] = [0.0, -1.0, 0.5, 2.0]
    mu, sigma = encode(m, np.ones(m.input_dim))
    assert np.array_equal(mu, m.mu_head.bias)
    assert np.allclose(sigma, np.exp(m.logsig_head.bias), rtol=0, atol=0)


@settings(max_examples=50)
@given(arrays(np.float64, 12, elements=st.floats(-1e3, 1e3)))
def test_sigma_positive(x):
    _, sigma = encode(tiny_model(), x)
    assert np.all(sigma > 0)


def test_hand_set_encoder():
    # 1 sample x 6 channels -> 2 hidden (relu) -> latent 1
    m = VaeGanModel.create(1, (2,), 1, (2,), seed=0)
    m.encoder[0].weights[:] = [[1, 0, 0, 0, 0, 0], [0, -1, 0, 0, 0, 0]]
    m.encoder[0].bias[:] = [0.0, 0.5]
    m.mu_head.weights[:] = [[2.0, 3.0]]
    m.mu_head.bias[:] = [0.25]
    m.logsig_head.weights[:] = [[-1.0, 1.0]]
    m.logsig_head.bias[:] = [0.0]
    x = np.array([1.5, 2.0, 9, 9, 9, 9])
    # [DERIVED] h = relu([1.5, -2 + 0.5]) = [1.5, 0]; mu = 3 + 0.25; log sigma = -1.5
    mu, sigma = encode(m, x)
    assert mu[0] == pytest.approx(3.25, abs=1e-15)
    assert sigma[0] == pytest.approx(math.exp(-1.5), rel=1e-15)


def test_log_sigma_is_clamped():
    m = tiny_model()
    m.logsig_head.weights[:] = 0.0
    m.logsig_head.bias[:] = [-50.0, 50.0, 0.0, 0.0]
    _, sigma = encode(m, np.zeros(m.input_dim))
    assert sigma[0] == pytest.approx(math.exp(vaegan.LOGSIG_MIN))
    assert sigma[1] == pytest.approx(math.exp(vaegan.LOGSIG_MAX))


def test_sample_latent_examples():
    mu = np.array([0.3, -1.0])
    assert np.array_equal(sample_latent(mu, np.array([2.0, 3.0]), np.zeros(2)), mu)
    noise = np.array([0.7, -0.4])
    assert np.array_equal(sample_latent(np.zeros(2), np.ones(2), noise), noise)
    tiny = np.full(2, math.exp(vaegan.LOGSIG_MIN))
    assert np.allclose(sample_latent(mu, tiny, np.ones(2)), mu, atol=3e-3)


def test_sample_latent_shape_mismatch():
    with pytest.raises(nn.DimensionError):
        sample_latent(np.zeros(2), np.ones(3), np.zeros(2))


# -- losses ----------------------------------------------------------------

@given(arrays(np.float64, (3, 4), elements=finite))
def test_reconstruction_of_itself_is_zero(m):
    assert reconstruction_loss(m, m) == 0.0


def test_reconstruction_single_scalar_window():
    # [DERIVED] MSE 0.25 plus max abs error 0.5
    assert reconstruction_loss(np.zeros((1, 1)), np.full((1, 1), 0.5)) == 0.75


def test_reconstruction_mean_and_max_parts():
    m = np.zeros((2, 2))
    mh = np.array([[1.0, 0.0], [0.0, 3.0]])
    # per-window MSE 0.5 and 4.5 -> mean 2.5; max abs error over the batch 3
    assert reconstruction_loss(m, mh) == pytest.approx(5.5)


@given(arrays(np.float64, (3, 5), elements=finite), arrays(np.float64, (3, 5), elements=finite))
def test_reconstruction_duplication_invariant(m, mh):
    dup = reconstruction_loss(np.concatenate([m, m]), np.concatenate([mh, mh]))
    assert dup == pytest.approx(reconstruction_loss(m, mh), rel=1e-12, abs=1e-12)


def test_reconstruction_gradient_matches_finite_differences():
    rng = nn.make_rng(4)
    m = rng.standard_normal((3, 5))
    mh = rng.standard_normal((3, 5))
    g = vaegan.reconstruction_grad(m, mh)
    num = nn.numeric_gradient(lambda: reconstruction_loss(m, mh), mh, 1e-6)
    assert nn.relative_error(g, num) < 1e-6


def test_kl_examples():
    assert abs(kl_loss(np.zeros(3), np.ones(3))) < 1e-12
    assert kl_loss(np.ones(1), np.ones(1)) == pytest.approx(0.5, abs=1e-12)
    assert kl_loss(np.ones(4), np.ones(4)) == pytest.approx(2.0, abs=1e-12)


@given(st.floats(-10, 10), st.floats(1e-3, 10))
def test_kl_nonnegative_and_zero_only_at_standard_normal(mu, sigma):
    # [DERIVED] per dim: (mu^2 + s^2 - 1 - ln s^2)/2 >= 0, with equality iff mu=0, s=1
    v = kl_loss(np.array([mu]), np.array([sigma]))
    assert v >= -1e-15
    expected = 0.5 * (mu * mu + sigma * sigma - 1.0 - math.log(sigma * sigma))
    assert v == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_kl_rejects_non_positive_sigma():
    with pytest.raises(ValueError):
        kl_loss(np.zeros(1), np.zeros(1))


def test_adversarial_loss_examples():
    assert adversarial_loss(1.0) < 1e-6
    assert adversarial_loss(0.5) == pytest.approx(math.log(2), abs=1e-12)


@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
def test_adversarial_loss_monotone(a, b):
    lo, hi = sorted((a, b))
    assert adversarial_loss(lo) >= adversarial_loss(hi)


def test_discriminator_loss_examples():
    assert discriminator_loss(1.0, 0.0) < 1e-6
    assert discriminator_loss(0.5, 0.5) == pytest.approx(2 * math.log(2), abs=1e-12)


@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
def test_discriminator_loss_symmetry(r, f):
    assert discriminator_loss(r, f) == pytest.approx(discriminator_loss(1 - f, 1 - r), rel=1e-9)


def test_total_generator_loss():
    assert total_generator_loss(1.0, 2.0, 3.0, LossWeights(0.0, 0.0)) == 1.0
    assert total_generator_loss(1.0, 2.0, 3.0, LossWeights(0.1, 0.05)) == pytest.approx(1.35)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 2), st.floats(0, 2))
def test_total_generator_loss_linear(r, k, a, l1, l2):
    w = LossWeights(l1, l2)
    base = total_generator_loss(r, k, a, w)
    assert total_generator_loss(r + 1, k, a, w) - base == pytest.approx(1.0, abs=1e-9)
    assert total_generator_loss(r, k + 1, a, w) - base == pytest.approx(l1, abs=1e-9)
    assert total_generator_loss(r, k, a + 1, w) - base == pytest.approx(l2, abs=1e-9)


def test_default_loss_weights():
    w = LossWeights()
    assert (w.lambda1, w.lambda2) == (0.1, 0.05)


# -- training --------------------------------------------------------------

def _noise_windows(n, samples, seed):
    return nn.make_rng(seed).standard_normal((n, samples, 6)) * 0.01


def test_same_seed_same_history():
    x = _noise_windows(80, 2, 0)
    cfg = TrainConfig(batch_size=16, max_epochs=4, seed=3)
    _, h1 = vaegan.train(tiny_model(1), x, cfg)
    _, h2 = vaegan.train(tiny_model(1), x, cfg)
    assert h1 == h2


def test_patience_one_stops_early_on_converged_model():
    x = _noise_windows(80, 2, 1)
    model, _ = vaegan.train(tiny_model(2), x, TrainConfig(batch_size=16, max_epochs=30, seed=0, lr=1e-3))
    _, hist = vaegan.train(model, x, TrainConfig(batch_size=16, max_epochs=30, seed=0, patience=1, lr=0.0),
                           fit_scale=False)
    assert len(hist) <= 2


def test_constant_data_is_reconstructed():
    # a constant signal normalizes to exact zeros, which a trained decoder reproduces
    # the max-abs term keeps a subgradient alive at any nonzero error, so Adam
    # jitters at a floor proportional to lr; a small lr with many steps clears it
    raw = np.tile([7200.0, 7190.0, 7210.0, 400.0, 60.0, 0.0], (16384, 5, 1))
    x = normalize_values(raw, 7200.0)
    assert not x.any()
    model = VaeGanModel.create(5, (32, 16), 4, (32, 16), seed=0)
    model, hist = vaegan.train(model, x, TrainConfig(lr=7e-5, batch_size=32, max_epochs=50, patience=50, seed=0))
    assert len(hist) <= 50
    assert min(h.val_recon for h in hist) < 1e-4
    e = infer_errors(model, PmuWindow(x[0]))
    assert e.e_recon < 1e-3


def test_training_rejects_too_few_windows():
    with pytest.raises(vaegan.EmptyInputError):
        vaegan.train(tiny_model(), _noise_windows(10, 2, 0), TrainConfig(batch_size=16))


def test_inference_is_deterministic():
    m = tiny_model(5)
    w = _noise_windows(1, 2, 9)[0]
    assert infer_errors(m, w) == infer_errors(m, PmuWindow(w))


def test_errors_independent_of_batching():
    m = VaeGanModel.create(3, (8,), 2, (8,), seed=0)
    x = _noise_windows(150, 3, 2)
    full = vaegan.errors_batch(m, x)
    parts = np.concatenate([vaegan.errors_batch(m, x[a:a + 7]) for a in range(0, 150, 7)])
    assert np.array_equal(full, parts)


def test_discriminator_error_is_bounded():
    m = tiny_model(6)
    e = vaegan.errors_batch(m, _noise_windows(20, 2, 3) * 1e4)
    assert np.all(e[:, 1] >= 0) and np.all(e[:, 1] <= -math.log(vaegan.PROB_EPS) + 1e-9)


def test_model_checkpoint_round_trip(tmp_path):
    m = tiny_model(8)
    m.channel_scale = np.arange(1.0, 7.0)
    vaegan.save_model(m, tmp_path / "m.ckpt")
    r = vaegan.load_model(tmp_path / "m.ckpt")
    x = _noise_windows(5, 2, 0)
    assert np.array_equal(vaegan.errors_batch(m, x), vaegan.errors_batch(r, x))
    vaegan.save_model(r, tmp_path / "r.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "r.ckpt").read_bytes()


def test_event_windows_reconstruct_worse(benchmark_system):
    ds, system = benchmark_system.dataset, benchmark_system.system
    x, y = benchmark_system.eval_windows
    e = benchmark_system.eval_errors
    assert e[y > 0, 0].mean() > e[y == 0, 0].mean()
