import numpy as np
import pytest

from diffnam.diffusion import (DenoiserNet, DiffNamModel, GaussianScoreDenoiser, MelNormalizer,
                               build_conditioner, cfg_predict, diffuse_step, forward_diffuse, make_schedule,
                               posterior_params, sample, schedule_from_config, train_step, upsample_lip)
from diffnam.errors import ContractError, DimensionError
from diffnam.models import SampleVariance, ScheduleShape
from diffnam.nn import Adam
from diffnam.synthdata import gen_corpus


class FixedDenoiser:
    """Returns preset conditional / unconditional estimates."""

    def __init__(self, cond_value, uncond_value):
        self.cond_value = cond_value
        self.uncond_value = uncond_value

    def predict(self, x_t, t, cond):
        return np.full(x_t.shape, self.uncond_value if cond is None else self.cond_value)


@pytest.fixture
def schedule(config):
    return schedule_from_config(config)


def test_single_step_schedule():
    s = make_schedule(1, 0.5, 0.5)
    assert s.alpha_bars.tolist() == [0.5]
    assert s.alpha_bar(0) == 1.0


def test_alpha_bar_is_the_running_product():
    s = make_schedule(50, 1e-4, 0.02)
    product = 1.0
    for beta in s.betas:
        product *= 1.0 - beta
    assert s.alpha_bar(50) == product


@pytest.mark.parametrize("shape", [ScheduleShape.LINEAR, ScheduleShape.COSINE])
def test_alpha_bar_strictly_decreasing(shape):
    s = make_schedule(40, 1e-4, 0.5, shape)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all((s.betas > 0) & (s.betas < 1))


def test_schedule_rejects_bad_ranges():
    for args in ((10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0), (0, 0.1, 0.2)):
        with pytest.raises(ContractError):
            make_schedule(*args)


def test_forward_with_zero_noise(schedule, rng):
    x0 = rng.normal(size=(5, 3))
    assert np.allclose(forward_diffuse(schedule, x0, 7, np.zeros_like(x0)), np.sqrt(schedule.alpha_bar(7)) * x0)
    for t in (0, schedule.steps + 1):
        with pytest.raises(ContractError):
            forward_diffuse(schedule, x0, t, np.zeros_like(x0))


def test_iterated_kernel_matches_closed_form(schedule, rng):
    n, t, x0 = 100_000, 10, 1.5
    x = np.full(n, x0)
    for step in range(1, t + 1):
        x = diffuse_step(schedule, x, step, rng.standard_normal(n))
    ab = schedule.alpha_bar(t)
    mean_tol = 4 * np.sqrt((1 - ab) / n)
    var_tol = 4 * np.sqrt(2.0 / n) * (1 - ab)
    assert abs(x.mean() - np.sqrt(ab) * x0) < mean_tol
    assert abs(x.var() - (1 - ab)) < var_tol


def test_vanishing_beta_keeps_the_input(rng):
    s = make_schedule(3, 1e-12, 1e-12)
    x = rng.normal(size=10)
    assert np.allclose(diffuse_step(s, x, 2, rng.normal(size=10)), x, atol=1e-5)


def test_posterior_at_first_step_is_x0(schedule, rng):
    x0, x1 = rng.normal(size=4), rng.normal(size=4)
    mean, variance = posterior_params(schedule, x1, x0, 1)
    assert variance == 0.0
    assert np.allclose(mean, x0)


def test_posterior_of_noise_free_point(schedule, rng):
    x0 = rng.normal(size=6)
    for t in (2, 10, schedule.steps):
        mean, variance = posterior_params(schedule, np.sqrt(schedule.alpha_bar(t)) * x0, x0, t)
        assert np.allclose(mean, np.sqrt(schedule.alpha_bar(t - 1)) * x0)
        assert 0.0 < variance <= schedule.beta(t)


def test_guidance_endpoints_are_bitwise(rng):
    denoiser = FixedDenoiser(0.3, -0.7)
    x = rng.normal(size=(4, 2))
    assert np.array_equal(cfg_predict(denoiser, x, 1, np.ones((4, 1)), 1.0), np.full((4, 2), 0.3))
    assert np.array_equal(cfg_predict(denoiser, x, 1, np.ones((4, 1)), 0.0), np.full((4, 2), -0.7))


class ArrayDenoiser:
    """Returns fixed conditional / unconditional estimate arrays."""

    def __init__(self, cond_value, uncond_value):
        self.cond_value = cond_value
        self.uncond_value = uncond_value

    def predict(self, x_t, t, cond):
        return self.uncond_value if cond is None else self.cond_value


def test_guidance_is_affine_in_w(rng):
    eps_c, eps_u = rng.normal(size=(50, 80)), rng.normal(size=(50, 80))
    denoiser = ArrayDenoiser(eps_c, eps_u)
    x, cond = np.zeros((50, 80)), np.ones((50, 1))
    g = {w: cfg_predict(denoiser, x, 1, cond, w) for w in (0.0, 1.0, 2.0, 3.5)}
    assert np.array_equal(g[1.0], eps_c) and np.array_equal(g[0.0], eps_u)
    step = g[1.0] - g[0.0]
    for w in (2.0, 3.5):
        # one rounding in the guided sum, one in the difference taken here
        bound = 4 * np.finfo(float).eps * np.maximum(np.abs(g[w]), np.abs(w * step))
        assert np.all(np.abs((g[w] - g[0.0]) - w * step) <= bound)
    with pytest.raises(ContractError):
        cfg_predict(denoiser, x, 1, cond, -1.0)


def test_gaussian_oracle_sampling_reproduces_moments(schedule):
    mu, sigma = 2.0, 1.0
    denoiser = GaussianScoreDenoiser(schedule, mu, sigma)
    samples = sample(denoiser, None, schedule, 1.0, seed=3, shape=(10_000, 1))
    assert abs(samples.mean() - mu) < 0.05
    assert abs(samples.var() - sigma ** 2) < 0.1 * sigma ** 2


def test_guidance_is_a_no_op_when_conditioner_is_ignored(schedule):
    denoiser = GaussianScoreDenoiser(schedule, 0.5, 0.8)
    cond = np.ones((20, 3))
    a = sample(denoiser, cond, schedule, 0.0, seed=5, shape=(20, 4))
    b = sample(denoiser, cond, schedule, 5.0, seed=5, shape=(20, 4))
    assert np.array_equal(a, b)


def test_sampling_is_deterministic(schedule):
    denoiser = GaussianScoreDenoiser(schedule, 0.0, 1.0)
    a = sample(denoiser, None, schedule, 1.0, seed=9, shape=(8, 4), variance=SampleVariance.POSTERIOR)
    b = sample(denoiser, None, schedule, 1.0, seed=9, shape=(8, 4), variance=SampleVariance.POSTERIOR)
    assert np.array_equal(a, b)


def test_zero_denoiser_loss_is_mean_abs_normal(schedule, rng):
    net = DenoiserNet(n_mels=80, cond_dim=6, hidden=8)
    state = net.state_dict()
    state["out.weight"] = np.zeros_like(state["out.weight"])
    state["out.bias"] = np.zeros_like(state["out.bias"])
    net.load_state_dict(state)
    x0 = [rng.normal(size=(50, 80)) for _ in range(8)]
    loss = train_step(net, None, schedule, x0, [None] * 8, seed=1)
    assert loss == pytest.approx(np.sqrt(2 / np.pi), abs=0.02)


def test_null_token_counter(schedule, rng):
    net = DenoiserNet(n_mels=4, cond_dim=3, hidden=8)
    x0 = [rng.normal(size=(10, 4)) for _ in range(6)]
    conds = [rng.normal(size=(10, 3)) for _ in range(6)]
    train_step(net, None, schedule, x0, conds, drop_prob=0.0)
    assert net.null_token_uses == 0
    train_step(net, None, schedule, x0, conds, drop_prob=1.0)
    assert net.null_token_uses == 6


def test_train_step_contracts(schedule, rng):
    net = DenoiserNet(n_mels=4, cond_dim=3, hidden=8)
    with pytest.raises(ContractError):
        train_step(net, None, schedule, [], [])
    with pytest.raises(DimensionError):
        train_step(net, None, schedule, [rng.normal(size=(10, 4))], [rng.normal(size=(10, 2))])


def test_denoiser_output_shape(schedule, rng):
    net = DenoiserNet(n_mels=5, cond_dim=3, hidden=8)
    for t in (1, 25, 50):
        assert net.predict(rng.normal(size=(12, 5)), t, rng.normal(size=(12, 3))).shape == (12, 5)
        assert net.predict(rng.normal(size=(12, 5)), t, None).shape == (12, 5)


def test_training_reduces_loss_on_gaussian_task(schedule):
    rng = np.random.default_rng(4)
    net = DenoiserNet(n_mels=4, cond_dim=2, hidden=16, seed=2)
    cond = [np.zeros((10, 2))] * 4

    def batch():
        return [2.0 + 0.5 * rng.standard_normal((10, 4)) for _ in range(4)]

    evaluation = [batch() for _ in range(20)]

    def held_out_loss():
        return np.mean([train_step(net, None, schedule, x0, cond, seed=i) for i, x0 in enumerate(evaluation)])

    before = held_out_loss()
    optimizer = Adam(net, lr=5e-3)
    for step in range(2000):
        train_step(net, optimizer, schedule, batch(), cond, seed=1000 + step)
    assert held_out_loss() < 0.9 * before


def test_conditioner_concatenates_streams(rng):
    lip, nam, text = rng.normal(size=(5, 3)), rng.normal(size=(9, 4)), rng.normal(size=(9, 2))
    cond = build_conditioner(lip, nam, text)
    assert cond.shape == (9, 3 + 4 + 2)
    assert np.array_equal(cond[:, :3], np.repeat(lip, 2, axis=0)[:9])
    assert np.array_equal(upsample_lip(lip, 10), np.repeat(lip, 2, axis=0))
    with pytest.raises(DimensionError):
        upsample_lip(lip, 11)


def test_normalizer_clamp_range(rng):
    mels = [rng.normal(size=(20, 3)) - 5.0 for _ in range(3)]
    norm = MelNormalizer.fit(mels)
    assert np.allclose(norm.denormalize(norm.normalize(mels[0])), mels[0])
    low, high = norm.clamp_range()
    assert np.allclose(norm.denormalize(low), np.log(1e-5))
    assert np.allclose(norm.denormalize(high), norm.max_value + 1.0)


def test_model_round_trip(small_corpus, fast_config, tmp_path):
    model = DiffNamModel(fast_config, n_phonemes=small_corpus.inventory.size)
    with pytest.raises(ContractError):
        model.generate(np.zeros((4, fast_config.conditioner_dim)), seed=0)
    conds = [model.conditioner(u.lip, u.nam, u.phonemes, u.durations) for u in small_corpus]
    assert conds[0].shape == (small_corpus[0].n_frames, fast_config.conditioner_dim)
    history = model.fit([u.mel for u in small_corpus], conds, steps=3, batch_size=2)
    assert len(history) == 3

    model.save(tmp_path / "diffnam.namc")
    loaded = DiffNamModel.load(tmp_path / "diffnam.namc")
    a = model.generate(conds[0], seed=1)
    b = loaded.generate(conds[0], seed=1)
    assert np.array_equal(a, b)
    assert a.shape == small_corpus[0].mel.shape
    assert a.min() >= np.log(fast_config.log_floor)
    assert a.max() <= model.normalizer.max_value + 1.0


def test_untrained_model_is_not_saved(fast_config, tmp_path):
    with pytest.raises(ContractError):
        DiffNamModel(fast_config).save(tmp_path / "x.namc")


@pytest.mark.slow
def test_samples_follow_their_conditioner(config):
    corpus = gen_corpus(7, 150, config=config)
    train, held_out = corpus.utterances[:50], corpus.utterances[50:]
    model = DiffNamModel(config, n_phonemes=corpus.inventory.size)
    model.fit([u.mel for u in train], [model.conditioner(u.lip, u.nam, u.phonemes, u.durations) for u in train])

    wins = 0
    for i, a in enumerate(held_out):
        b = held_out[(i + 1) % len(held_out)]
        generated = model.generate(model.conditioner(a.lip, a.nam, a.phonemes, a.durations), seed=i)
        n = min(a.n_frames, b.n_frames)
        wins += np.abs(generated[:n] - a.mel[:n]).mean() < np.abs(generated[:n] - b.mel[:n]).mean()
    assert wins >= 0.8 * len(held_out)
