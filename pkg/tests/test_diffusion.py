import math

import numpy as np
import pytest

from steel.diffusion import (Denoiser, DenoiserConfig, DiffusionConfig, ancestral_sample,
                             default_hidden, drop_raw_weights, ema_update, load_checkpoint,
                             make_schedule, q_sample, sample_params, save_checkpoint,
                             train_diffusion, zoo_stats)
from steel.errors import CorruptionError, DegenerateZoo, FormatError, InvalidArgument, NumericError
from steel.numerics import grad_check

TINY = DiffusionConfig(T=50, hidden=16, epochs=30, batch_size=32, seed=1)


@pytest.fixture(scope="module")
def tiny_ckpt():
    m = np.random.default_rng(0).standard_normal((40, 5)) * [1, 2, 3, 0.5, 1] + [0, 1, 0, -1, 2]
    return m, train_diffusion(m, TINY)


def test_schedule_endpoints():
    s = make_schedule()
    assert s.T == 1000 and len(s.betas) == 1001
    assert s.betas[0] == 0 and s.alpha_bars[0] == 1
    assert s.betas[1] == pytest.approx(1e-4) and s.betas[1000] == pytest.approx(2e-2)
    assert np.all(np.diff(s.betas[1:]) > 0)
    assert s.alpha_bars[1000] < 1e-4


def test_alpha_bar_log_space_matches_product():
    s = make_schedule()
    naive = np.cumprod(1.0 - s.betas)
    np.testing.assert_allclose(s.alpha_bars, naive, rtol=1e-12, atol=0)


def test_schedule_rejects_bad_arguments():
    for kw in ({"T": 0}, {"beta_min": 0.0}, {"beta_max": 1.0}, {"beta_min": 0.03}):
        with pytest.raises(InvalidArgument):
            make_schedule(**kw)


def test_q_sample_cases(rng):
    s = make_schedule()
    x0 = rng.standard_normal((3, 4))
    eps = rng.standard_normal((3, 4))
    np.testing.assert_allclose(q_sample(x0, 1, np.zeros_like(x0), s), math.sqrt(1 - 1e-4) * x0)
    far = q_sample(x0, 1000, eps, s)
    ab = float(np.prod(1 - np.linspace(1e-4, 2e-2, 1000)))
    np.testing.assert_allclose(far, math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps, rtol=1e-10)
    assert np.abs(far - eps).max() < 0.05
    per_row = q_sample(x0, np.array([1, 500, 1000]), eps, s)
    np.testing.assert_allclose(per_row[1], q_sample(x0[1], 500, eps[1], s))
    for bad in (0, 1001):
        with pytest.raises(InvalidArgument):
            q_sample(x0, bad, eps, s)


def test_q_sample_marginal_variance(rng):
    s = make_schedule()
    x0 = np.full((200_000, 1), 2.0)
    t = 300
    xt = q_sample(x0, t, rng.standard_normal(x0.shape), s)
    ab = s.alpha_bars[t]
    assert abs(xt.mean() - 2 * math.sqrt(ab)) < 0.01
    assert abs(xt.var() / (1 - ab) - 1) < 0.02


def test_default_hidden_rounding():
    assert default_hidden(85) == 512
    assert default_hidden(200) == 1024
    assert default_hidden(10, multiple=None) == 40
    assert DenoiserConfig(85, hidden=256).hidden_dim == 256


def test_time_conditioning_is_live(rng):
    net = Denoiser.init(DenoiserConfig(4, hidden=16), rng)
    x = rng.standard_normal(4)
    a, b = net(x, 1), net(x, 1000)
    assert a.shape == (4,)
    assert np.abs(a - b).max() > 1e-3


def test_batched_forward_matches_rows(rng):
    net = Denoiser.init(DenoiserConfig(3, hidden=8), rng)
    x = rng.standard_normal((5, 3))
    t = np.array([3, 1, 3, 700, 9])
    out = net(x, t)
    for i in range(5):
        np.testing.assert_allclose(out[i], net(x[i], int(t[i])), rtol=1e-12, atol=1e-14)
    with pytest.raises(InvalidArgument):
        net(np.zeros(4), 1)


def test_denoiser_gradient_matches_finite_differences(rng):
    net = Denoiser.init(DenoiserConfig(3, hidden=6, time_mult=2), rng)
    x = rng.standard_normal((7, 3))
    t = np.array([1, 5, 5, 20, 900, 1, 333])
    eps = rng.standard_normal((7, 3))
    keys = sorted(net.params)
    shapes = [net.params[k].shape for k in keys]
    sizes = [net.params[k].size for k in keys]

    def unflat(v):
        out, pos = {}, 0
        for k, sh, sz in zip(keys, shapes, sizes):
            out[k] = v[pos:pos + sz].reshape(sh)
            pos += sz
        return out

    def f(v):
        loss, g = net.with_params(unflat(v)).loss_and_grad(x, t, eps)
        return loss, np.concatenate([g[k].ravel() for k in keys])

    flat = np.concatenate([net.params[k].ravel() for k in keys])
    assert grad_check(f, flat, 1e-6) < 1e-5


def test_ema_update_limits(rng):
    p = {"a": rng.standard_normal(3)}
    e = {"a": rng.standard_normal(3)}
    np.testing.assert_array_equal(ema_update(e, p, 0.0)["a"], p["a"])
    np.testing.assert_array_equal(ema_update(e, p, 1.0)["a"], e["a"])


def test_ema_with_zero_decay_tracks_raw_weights():
    m = np.random.default_rng(1).standard_normal((20, 3))
    ck = train_diffusion(m, DiffusionConfig(T=20, hidden=8, epochs=3, batch_size=8,
                                            ema_decay=0.0, ema_warmup=False))
    for k in ck.params:
        np.testing.assert_array_equal(ck.ema[k], ck.params[k])


def test_zoo_stats_and_degenerate_zoo():
    mean, std = zoo_stats(np.array([[1.0, 5.0], [3.0, 5.0]]))
    np.testing.assert_array_equal(mean, [2.0, 5.0])
    np.testing.assert_array_equal(std, [1.0, 1e-6])
    with pytest.raises(DegenerateZoo):
        zoo_stats(np.ones((4, 3)))
    with pytest.raises(DegenerateZoo):
        train_diffusion(np.ones((4, 3)), TINY)


def test_training_input_checks():
    with pytest.raises(InvalidArgument):
        train_diffusion(np.zeros((1, 3)), TINY)
    with pytest.raises(NumericError):
        train_diffusion(np.array([[0.0, np.nan], [1.0, 2.0]]), TINY)


def test_training_deterministic_and_logs_history(tiny_ckpt):
    m, ck = tiny_ckpt
    again = train_diffusion(m, TINY)
    assert ck.digest() == again.digest()
    hist = ck.metadata["loss_history"]
    assert len(hist) == TINY.epochs and all(np.isfinite(hist))


def test_normalization_round_trip(tiny_ckpt, rng):
    m, ck = tiny_ckpt
    np.testing.assert_allclose(ck.denormalize(ck.normalize(m)), m, rtol=1e-12, atol=1e-12)
    z = ck.normalize(m)
    np.testing.assert_allclose(z.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(0), 1, atol=1e-12)


def test_sample_shape_and_determinism(tiny_ckpt):
    _, ck = tiny_ckpt
    a = sample_params(ck, 9, seed=3, chunk=4)
    b = sample_params(ck, 9, seed=3, chunk=4)
    assert a.matrix.shape == (9, 5) and a.strategy == "steel"
    np.testing.assert_array_equal(a.matrix, b.matrix)
    assert not np.array_equal(a.matrix, sample_params(ck, 9, seed=4, chunk=4).matrix)
    with pytest.raises(InvalidArgument):
        sample_params(ck, 0, seed=1)


def test_checkpoint_round_trip(tiny_ckpt, tmp_path):
    _, ck = tiny_ckpt
    p = tmp_path / "d.stdf"
    save_checkpoint(ck, p)
    back = load_checkpoint(p)
    assert back.config == ck.config and back.d == ck.d
    for k in ck.ema:
        np.testing.assert_array_equal(back.ema[k], ck.ema[k].astype(np.float32))
        np.testing.assert_array_equal(back.params[k], ck.params[k].astype(np.float32))
    np.testing.assert_array_equal(back.mean, ck.mean)
    assert back.metadata == ck.metadata
    save_checkpoint(back, tmp_path / "again.stdf")
    assert (tmp_path / "again.stdf").read_bytes() == p.read_bytes()


def test_samples_unchanged_without_raw_weights(tiny_ckpt, tmp_path):
    _, ck = tiny_ckpt
    save_checkpoint(ck, tmp_path / "full.stdf")
    save_checkpoint(drop_raw_weights(ck), tmp_path / "ema.stdf")
    full, ema = load_checkpoint(tmp_path / "full.stdf"), load_checkpoint(tmp_path / "ema.stdf")
    assert ema.params is None
    assert (tmp_path / "ema.stdf").stat().st_size < (tmp_path / "full.stdf").stat().st_size
    np.testing.assert_array_equal(sample_params(full, 6, 2).matrix, sample_params(ema, 6, 2).matrix)


def test_checkpoint_corruption(tiny_ckpt, tmp_path):
    _, ck = tiny_ckpt
    p = tmp_path / "d.stdf"
    save_checkpoint(ck, p)
    blob = p.read_bytes()
    bad = tmp_path / "bad.stdf"
    bad.write_bytes(blob[:-7])
    with pytest.raises(CorruptionError):
        load_checkpoint(bad)
    bad.write_bytes(blob + b"\0")
    with pytest.raises(CorruptionError):
        load_checkpoint(bad)
    bad.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        load_checkpoint(bad)


class _AnalyticGaussian:
    """Exact epsilon predictor for data ~ N(0, s^2 I)."""

    def __init__(self, schedule, s):
        self.schedule, self.s2 = schedule, s * s

    def __call__(self, x, t):
        ab = self.schedule.alpha_bars[t]
        return math.sqrt(1 - ab) * x / (ab * self.s2 + 1 - ab)


@pytest.mark.parametrize("variance", ["beta", "posterior"])
def test_sampler_recovers_gaussian_with_exact_denoiser(variance):
    s = make_schedule()
    rng = np.random.default_rng(0)
    x = ancestral_sample(_AnalyticGaussian(s, 0.5), s, rng.standard_normal((20_000, 2)), rng, variance)
    assert abs(x.var() / 0.25 - 1) < 0.05
    assert abs(x.mean()) < 0.02


def test_sampler_rejects_unknown_variance():
    s = make_schedule(T=3)
    with pytest.raises(InvalidArgument):
        ancestral_sample(_AnalyticGaussian(s, 1.0), s, np.zeros((1, 1)), np.random.default_rng(0), "bogus")


def test_alpha_bar_first_step_and_small_t_limit(rng):
    s = make_schedule()
    assert s.alpha_bars[1] == pytest.approx(0.9999, abs=1e-15)
    x0, eps = rng.standard_normal(6), rng.standard_normal(6)
    assert np.linalg.norm(q_sample(x0, 1, eps, s) - x0) <= math.sqrt(s.betas[1]) * np.linalg.norm(eps) + 1e-4 * np.linalg.norm(x0)


def test_q_sample_zero_signal_variance(rng):
    s = make_schedule()
    t = 40
    draws = q_sample(np.zeros(100_000), t, rng.standard_normal(100_000), s)
    target = 1 - s.alpha_bars[t]
    # sigma of the sample variance for a Gaussian: target * sqrt(2 / (N - 1))
    assert abs(draws.var(ddof=1) - target) < 3 * target * math.sqrt(2 / (len(draws) - 1))


def test_training_loss_improves_first_to_last_window(tiny_ckpt):
    m, _ = tiny_ckpt
    ck = train_diffusion(m, DiffusionConfig(T=50, hidden=16, epochs=200, batch_size=32, seed=1))
    hist = np.array(ck.metadata["loss_history"])
    w = max(1, len(hist) // 10)
    assert hist[-w:].mean() <= hist[:w].mean()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_checkpoint():
    m = np.random.default_rng(3).standard_normal((16, 3))
    cfg = DiffusionConfig(T=20, hidden=8, epochs=50, batch_size=16, optimizer="adam", lr=1e200)
    with pytest.raises(NumericError) as info:
        train_diffusion(m, cfg)
    ck = info.value.checkpoint
    assert ck.metadata["aborted_epoch"] >= 1
    assert all(np.all(np.isfinite(v)) for v in ck.ema.values())
