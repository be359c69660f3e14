"""Schedule, forward process, training step and ancestral sampling."""

import numpy as np
import pytest

from steerdiff import autodiff as ad
from steerdiff import diffusion, nn
from steerdiff.autodiff import Tensor
from steerdiff.diffusion import (NoiseSchedule, TrainSample, forward_sample,
                                 make_schedule, sample, strided_timesteps,
                                 train_step)
from steerdiff.unet import NetworkSpec, UNet


def tiny_net(seed=0, t_max=50, size_levels=(8, 16)):
    spec = NetworkSpec(levels=2, channels=size_levels, time_width=16,
                       token_width=8, token_count=2, t_max=t_max)
    return UNet(spec, np.random.default_rng(seed))


def small_schedule(T=50):
    return make_schedule(T, 1e-4, 0.05)


# --- schedule -------------------------------------------------------------------

def test_schedule_two_step_product():
    s = make_schedule(2, 0.1, 0.1)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.81], atol=1e-15)


def test_schedule_small_beta_limit():
    s = make_schedule(100, 1e-9, 1e-9)
    assert s.alpha_bar[-1] > 1.0 - 1e-6


def test_default_schedule_matches_64bit_recompute():
    s = make_schedule()
    beta = np.linspace(diffusion.DEFAULT_BETA_START, diffusion.DEFAULT_BETA_END,
                       diffusion.DEFAULT_T, dtype=np.float64)
    recomputed = np.cumprod(1.0 - beta)
    assert s.alpha_bar.dtype == np.float64
    np.testing.assert_array_equal(s.alpha_bar, recomputed)
    assert s.alpha_bar[-1] < 0.05
    assert abs(s.alpha_bar[-1] - 0.0171681116549409) < 1e-15


def test_schedule_alpha_bar_strictly_decreasing():
    s = make_schedule(123, 5e-4, 0.03)
    assert (np.diff(s.alpha_bar) < 0).all()
    assert s.alpha_bar[-1] < s.alpha_bar[0]


@pytest.mark.parametrize("args", [(1, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1),
                                  (10, 0.1, 1.0)])
def test_schedule_rejects_bad_bounds(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_schedule_type_rejects_nondecreasing_alpha_bar():
    with pytest.raises(ValueError, match="decreasing"):
        NoiseSchedule(2, np.array([0.1, 0.1]), np.array([0.9, 0.9]),
                      np.array([0.9, 0.9]))


# --- forward process ------------------------------------------------------------

def test_forward_zero_noise_scales_by_sqrt_abar():
    s = small_schedule()
    x0 = np.random.default_rng(0).standard_normal((2, 1, 4, 4)).astype(np.float32)
    for t in (1, 25, 50):
        xt = forward_sample(x0, t, np.zeros_like(x0), s)
        np.testing.assert_allclose(xt, np.sqrt(s.alpha_bar[t - 1]) * x0, rtol=1e-6)


def test_forward_near_zero_abar_is_noise_dominated():
    s = make_schedule(400, 1e-4, 0.05)
    assert s.alpha_bar[-1] < 1e-4
    rng = np.random.default_rng(1)
    x0 = rng.uniform(-1, 1, (1, 1, 8, 8)).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    xt = forward_sample(x0, s.T, eps, s)
    abar = s.alpha_bar[-1]
    # |x_t - eps| <= sqrt(abar)|x0| + (1 - sqrt(1-abar))|eps|
    bound = np.sqrt(abar) * np.abs(x0).max() + (1 - np.sqrt(1 - abar)) * np.abs(eps).max()
    assert np.abs(xt - eps).max() <= bound + 1e-6


def test_forward_rejects_out_of_range_t():
    s = small_schedule()
    x = np.zeros((1, 1, 2, 2), dtype=np.float32)
    for t in (0, 51):
        with pytest.raises(ValueError, match="outside"):
            forward_sample(x, t, x, s)


def test_forward_per_sample_timesteps():
    s = small_schedule()
    x0 = np.ones((3, 1, 2, 2), dtype=np.float32)
    xt = forward_sample(x0, np.array([1, 10, 50]), np.zeros_like(x0), s)
    for i, t in enumerate([1, 10, 50]):
        np.testing.assert_allclose(xt[i], np.sqrt(s.alpha_bar[t - 1]), rtol=1e-6)


def test_forward_chain_matches_closed_form_statistics():
    """Iterating the per-step kernel reproduces the closed form within 1%."""
    s = make_schedule()  # default 200-step schedule
    t_target = 60
    n = 400_000
    rng = np.random.default_rng(7)
    x = np.full(n, 0.7)
    for t in range(1, t_target + 1):
        beta = s.beta[t - 1]
        x = np.sqrt(1.0 - beta) * x + np.sqrt(beta) * rng.standard_normal(n)
    want_mean = np.sqrt(s.alpha_bar[t_target - 1]) * 0.7
    want_var = 1.0 - s.alpha_bar[t_target - 1]
    assert abs(x.mean() - want_mean) / abs(want_mean) < 0.01
    assert abs(x.var() - want_var) / want_var < 0.01


def test_marginal_statistics_at_small_abar():
    """Criterion: at abar < 0.05, x_t over N(0,1) data has mean ~0, var ~1."""
    s = make_schedule()
    assert s.alpha_bar[-1] < 0.05
    rng = np.random.default_rng(3)
    n = 100_000
    x0 = rng.standard_normal(n)
    eps = rng.standard_normal(n)
    xt = forward_sample(x0, s.T, eps, s)
    assert abs(xt.mean()) < 0.02
    assert abs(xt.var() - 1.0) < 0.02


# --- training step --------------------------------------------------------------

def make_batch(rng, schedule, n=4, hw=8, token_count=2):
    batch = []
    for _ in range(n):
        x0 = rng.uniform(-1, 1, (1, hw, hw)).astype(np.float32)
        eps = rng.standard_normal((1, hw, hw)).astype(np.float32)
        t = int(rng.integers(1, schedule.T + 1))
        batch.append(TrainSample(x0, int(rng.integers(0, token_count)), None, t, eps))
    return batch


class StubPredictor:
    """Callable standing in for the network; returns a fixed mapping of eps."""

    def __init__(self, mode):
        self.mode = mode

    def __call__(self, x, t, token, residuals=None):
        del t, token, residuals
        if self.mode == "zeros":
            return Tensor(np.zeros(x.shape, dtype=np.float32), requires_grad=True)
        raise ValueError(self.mode)


def test_train_step_perfect_predictor_zero_loss():
    s = small_schedule()
    rng = np.random.default_rng(0)
    batch = make_batch(rng, s)
    eps_stack = np.stack([b.eps for b in batch])

    class Perfect:
        def __call__(self, x, t, token, residuals=None):
            return Tensor(eps_stack.copy(), requires_grad=True)

    loss, _ = train_step(Perfect(), batch, s, nn.Adam([]))
    assert loss == 0.0


def test_train_step_zero_predictor_unit_loss():
    s = small_schedule()
    rng = np.random.default_rng(1)
    batch = make_batch(rng, s, n=4, hw=64)  # 16384 elements >= 1e4
    loss, _ = train_step(StubPredictor("zeros"), batch, s, nn.Adam([]))
    assert abs(loss - 1.0) < 0.05


def test_train_step_frozen_net_is_stateless():
    s = small_schedule()
    net = tiny_net(seed=2)
    net.freeze()
    rng = np.random.default_rng(2)
    batch = make_batch(rng, s)
    optim = nn.Adam(net.parameters())
    l1, _ = train_step(net, batch, s, optim)
    l2, _ = train_step(net, batch, s, optim)
    assert l1 == l2


def test_train_step_aborts_on_nan_with_diagnostics():
    s = small_schedule()
    rng = np.random.default_rng(3)
    batch = make_batch(rng, s)
    batch[0].x0[:] = np.nan
    net = tiny_net(seed=3)
    with pytest.raises(RuntimeError) as exc:
        train_step(net, batch, s, nn.Adam(net.parameters(), lr=1e-4))
    msg = str(exc.value)
    assert "step" in msg and "lr" in msg


def test_train_step_reduces_loss_on_tiny_problem():
    s = small_schedule()
    net = tiny_net(seed=4)
    rng = np.random.default_rng(4)
    optim = nn.Adam(net.parameters(), lr=2e-3, clip_norm=1.0)
    losses = []
    for step in range(60):
        batch = make_batch(np.random.default_rng(step), s)
        loss, _ = train_step(net, batch, s, optim)
        losses.append(loss)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


# --- sampling -------------------------------------------------------------------

def test_strided_timesteps_cover_endpoints():
    taus = strided_timesteps(200, 50)
    assert taus[0] == 1 and taus[-1] == 200
    assert (np.diff(taus) > 0).all()
    np.testing.assert_array_equal(strided_timesteps(50, 50), np.arange(1, 51))


def test_sample_deterministic_per_seed():
    s = small_schedule()
    net = tiny_net(seed=5, t_max=50)
    a = sample(net, s, tokens=0, shape=(2, 1, 8, 8), seed=11)
    b = sample(net, s, tokens=0, shape=(2, 1, 8, 8), seed=11)
    c = sample(net, s, tokens=0, shape=(2, 1, 8, 8), seed=12)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sample_full_steps_equals_default():
    s = small_schedule()
    net = tiny_net(seed=6, t_max=50)
    a = sample(net, s, tokens=1, shape=(1, 1, 8, 8), seed=0, steps=None)
    b = sample(net, s, tokens=1, shape=(1, 1, 8, 8), seed=0, steps=s.T)
    assert np.array_equal(a, b)


def test_sample_output_clamped_to_unit_range():
    s = small_schedule()
    net = tiny_net(seed=7, t_max=50)
    x = sample(net, s, tokens=0, shape=(4, 1, 8, 8), seed=1, steps=10)
    assert x.min() >= -1.0 and x.max() <= 1.0


def test_sample_rejects_bad_step_count():
    s = small_schedule()
    net = tiny_net(seed=8, t_max=50)
    with pytest.raises(ValueError, match="inference steps"):
        sample(net, s, tokens=0, shape=(1, 1, 8, 8), seed=0, steps=51)


@pytest.mark.slow
def test_memorization_of_single_image():
    """5k steps on one constant image; samples land within L_inf 0.15 of it."""
    s = make_schedule(50, 1e-3, 0.15)  # abar_T ~ 0.019: x_T is nearly pure noise
    spec = NetworkSpec(levels=2, channels=(16, 32), time_width=32, token_width=16,
                       token_count=2, t_max=50)
    net = UNet(spec, np.random.default_rng(9))
    target = np.full((1, 16, 16), 0.25, dtype=np.float32)  # [0,1] space

    def provider(_, rng):
        t = int(rng.integers(1, s.T + 1))
        eps = rng.standard_normal(target.shape).astype(np.float32)
        return TrainSample(target * 2.0 - 1.0, 0, None, t, eps)

    diffusion.fit(net, s, provider, steps=5000, seed=0, lr=2e-3, batch_size=4)
    out = sample(net, s, tokens=0, shape=(4, 1, 16, 16), seed=5)
    assert np.abs(out - (target * 2.0 - 1.0)).max() < 0.15


def test_fit_marks_module_trained_and_logs(tmp_path):
    s = small_schedule()
    net = tiny_net(seed=10, t_max=50)
    log = tmp_path / "train.csv"

    def provider(_, rng):
        x0 = rng.uniform(-1, 1, (1, 8, 8)).astype(np.float32)
        return TrainSample(x0, 0, None, int(rng.integers(1, 51)),
                           rng.standard_normal((1, 8, 8)).astype(np.float32))

    hist = diffusion.fit(net, s, provider, steps=5, seed=0, batch_size=2, log_path=log)
    assert net.trained and len(hist) == 5
    lines = log.read_text().strip().splitlines()
    assert lines[0] == "step,loss,grad_norm,lr" and len(lines) == 6
