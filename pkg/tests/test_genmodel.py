import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gscsim import genmodel as G
from gscsim import nn
from gscsim.tensor import ShapeError

SCHED = G.DiffusionSchedule.linear(1000)


# -- schedule --------------------------------------------------------------------------------------
def test_schedule_from_betas_example():
    s = G.DiffusionSchedule.from_betas([0.5, 0.5])
    np.testing.assert_allclose(s.alphas, [1.0, 0.5, 0.25])
    assert s.T == 2


def test_linear_schedule_endpoints():
    assert SCHED.T == 1000
    assert SCHED.betas[0] == pytest.approx(8.5e-4)
    assert SCHED.betas[-1] == pytest.approx(0.012)
    assert np.all(np.diff(SCHED.alphas) < 0)
    assert 0 < SCHED.alphas[-1] < 0.01


@pytest.mark.parametrize("betas", [[], [0.0, 0.1], [1.0], [[0.1]]])
def test_schedule_rejects_bad_betas(betas):
    with pytest.raises(ValueError):
        G.DiffusionSchedule.from_betas(betas)


def test_forward_diffuse_examples(rng):
    s = G.DiffusionSchedule.from_betas([0.5, 0.5])
    z0, eps = np.ones(3), np.full(3, 2.0)
    np.testing.assert_allclose(G.forward_diffuse(z0, 2, eps, s), 0.5 + np.sqrt(0.75) * 2.0)
    rows = G.forward_diffuse(np.ones((2, 3)), np.array([1, 2]), np.zeros((2, 3)), s)
    np.testing.assert_allclose(rows[:, 0], [np.sqrt(0.5), 0.5])
    with pytest.raises(ValueError):
        G.forward_diffuse(z0, 0, eps, s)
    with pytest.raises(ValueError):
        G.forward_diffuse(z0, 3, eps, s)


def test_forward_diffuse_matches_incremental_in_distribution():
    rng = np.random.default_rng(0)
    n, t = 40000, 30
    z = np.full(n, 1.5)
    for k in range(1, t + 1):
        z = G.diffuse_step(z, k, rng.standard_normal(n), SCHED)
    a = SCHED.alphas[t]
    assert abs(z.mean() - np.sqrt(a) * 1.5) < 0.02
    assert abs(z.var() - (1 - a)) < 0.01


def test_ddim_same_index_is_identity(rng):
    z = rng.standard_normal((2, 4, 8, 8))
    np.testing.assert_array_equal(G.ddim_step(z, 500, 500, rng.standard_normal(z.shape), SCHED), z)


def test_ddim_with_true_noise_recovers_clean(rng):
    z0, eps = rng.standard_normal(10), rng.standard_normal(10)
    zt = G.forward_diffuse(z0, 700, eps, SCHED)
    np.testing.assert_allclose(G.ddim_step(zt, 700, 0, eps, SCHED), z0, atol=1e-10)
    # stepping through an intermediate index lands on the same noised point
    mid = G.ddim_step(zt, 700, 300, eps, SCHED)
    np.testing.assert_allclose(mid, G.forward_diffuse(z0, 300, eps, SCHED), atol=1e-10)


def test_ddim_rejects_forward_step(rng):
    with pytest.raises(ValueError):
        G.ddim_step(np.zeros(2), 10, 20, np.zeros(2), SCHED)


@given(st.integers(1, 999))
def test_ddim_continuous_in_target_step(t):
    z, e = np.array([0.7, -1.2]), np.array([0.3, 0.9])
    a = G.ddim_step(z, t, t, e, SCHED)
    b = G.ddim_step(z, t, t - 1, e, SCHED)
    assert np.abs(a - b).max() < 0.05


def test_sampling_steps_examples():
    assert G.sampling_steps(10, 3) == [10, 7, 3, 0]
    assert G.sampling_steps(1000, 20) == list(range(1000, 0, -50)) + [0]
    assert G.sampling_steps(5, 1) == [5, 0]
    with pytest.raises(ValueError):
        G.sampling_steps(10, 0)
    with pytest.raises(ValueError):
        G.sampling_steps(10, 11)


@given(st.integers(1, 200), st.data())
def test_sampling_steps_strictly_decreasing(T_steps, data):
    T_B = data.draw(st.integers(1, T_steps))
    steps = G.sampling_steps(T_steps, T_B)
    assert len(steps) == T_B + 1
    assert steps[0] == T_steps and steps[-1] == 0
    assert all(a > b for a, b in zip(steps, steps[1:]))


# -- generation ---------------------------------------------------------------------------------
def test_generate_with_oracle_predictor_returns_target(rng):
    target = rng.standard_normal((3, 4, 8, 8))

    def oracle(z, t):
        a = SCHED.alphas[t]
        return (z - np.sqrt(a) * target) / np.sqrt(1 - a)

    noise = rng.standard_normal(target.shape)
    np.testing.assert_allclose(G.generate(oracle, None, noise, SCHED, 20), target, atol=1e-9)


def _predictor(rng, vocab=6, width=8):
    return G.NoisePredictor(rng, vocab, width=width, embed_dim=8, attn_dim=8)


def test_generate_deterministic_and_seed_sensitive():
    pred = _predictor(np.random.default_rng(0))
    tokens = np.array([[0, 1, 2, 3]])
    n1 = G.seed_noise([11, 12], (4, 8, 8))
    a = G.generate(pred, tokens, n1, SCHED, 4)
    b = G.generate(pred, tokens, n1, SCHED, 4)
    np.testing.assert_array_equal(a, b)
    c = G.generate(pred, tokens, G.seed_noise([13, 12], (4, 8, 8)), SCHED, 4)
    assert not np.array_equal(a[0], c[0])
    np.testing.assert_array_equal(a[1], c[1])


def test_generate_batching_is_invisible():
    pred = _predictor(np.random.default_rng(0))
    noise = G.seed_noise(range(5), (4, 8, 8))
    a = G.generate(pred, [[0, 1]], noise, SCHED, 3, batch=5)
    b = G.generate(pred, [[0, 1]], noise, SCHED, 3, batch=2)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_seed_noise_is_per_seed():
    a = G.seed_noise([1, 2], (3,))
    np.testing.assert_array_equal(a[0], np.random.default_rng(1).standard_normal(3))
    np.testing.assert_array_equal(G.seed_noise([2], (3,))[0], a[1])


def test_predictor_shapes_and_errors(rng):
    pred = _predictor(rng)
    ctx = pred.embed_prompt([[0, 1, 2]])
    out = pred(rng.standard_normal((2, 4, 8, 8)), 5, ctx)
    assert out.shape == (2, 4, 8, 8)
    with pytest.raises(ShapeError):
        pred(rng.standard_normal((2, 3, 8, 8)), 5, ctx)
    with pytest.raises(IndexError):
        pred.embed_prompt([[6]])
    mw = nn.MetaWord.random(8, rng)
    assert pred.embed_prompt([[0, 1]], mw).shape == (1, 3, 8)


def test_initial_diffusion_loss_near_one(rng):
    pred = _predictor(rng)
    z0 = rng.standard_normal((16, 4, 8, 8))
    loss = G.diffusion_loss(pred, z0, np.zeros((16, 2), int), SCHED, rng).item()
    assert 0.9 < loss < 1.1


def test_diffusion_training_reduces_loss(rng):
    pred = _predictor(rng, width=8)
    z0 = np.tile(rng.standard_normal((1, 4, 8, 8)), (16, 1, 1, 1))
    tokens = np.zeros((16, 2), int)
    hist = G.train_noise_predictor(pred, z0, tokens, SCHED, G.DiffusionTrainConfig(15, 3e-3, 16), rng)
    assert np.mean(hist[-3:]) < hist[0]


def test_zero_epochs_changes_nothing(rng):
    pred = _predictor(rng)
    before = pred.state_dict()
    G.train_noise_predictor(pred, np.zeros((2, 4, 8, 8)), np.zeros((2, 1), int), SCHED,
                            G.DiffusionTrainConfig(0), rng)
    for k, v in pred.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_lora_training_leaves_base_untouched(rng):
    pred = _predictor(rng)
    before = pred.state_dict()
    lora = nn.make_lora_set(pred, 2, rng, G.lora_filter())
    G.train_noise_predictor(pred, rng.standard_normal((4, 4, 8, 8)), np.zeros((4, 2), int), SCHED,
                            G.DiffusionTrainConfig(2, 1e-2, 4), rng, trainable="lora", lora=lora)
    for k, v in pred.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    assert any(np.any(ad.B.data != 0) for ad in lora.values())


def test_metaword_training_moves_only_metaword(rng):
    pred = _predictor(rng)
    before = pred.state_dict()
    mw = nn.MetaWord.random(8, rng)
    init = mw.embedding.data.copy()
    G.train_noise_predictor(pred, rng.standard_normal((4, 4, 8, 8)), np.zeros((4, 2), int), SCHED,
                            G.DiffusionTrainConfig(2, 1e-2, 4), rng, trainable="metaword", metaword=mw)
    assert not np.array_equal(mw.embedding.data, init)
    for k, v in pred.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_training_argument_errors(rng):
    pred = _predictor(rng)
    z, tok = np.zeros((2, 4, 8, 8)), np.zeros((2, 1), int)
    cfg = G.DiffusionTrainConfig(1)
    with pytest.raises(ValueError):
        G.train_noise_predictor(pred, z, tok, SCHED, cfg, rng, trainable="lora")
    with pytest.raises(ValueError):
        G.train_noise_predictor(pred, z, tok, SCHED, cfg, rng, trainable="metaword")
    with pytest.raises(ShapeError):
        G.train_noise_predictor(pred, z, tok[:1], SCHED, cfg, rng)


def test_lora_filter_scopes(rng):
    pred = _predictor(rng)
    matrices = set(nn.make_lora_set(pred, 2, rng, G.lora_filter("matrices")))
    everything = set(nn.make_lora_set(pred, 2, rng, G.lora_filter("all")))
    attention = set(nn.make_lora_set(pred, 2, rng, G.lora_filter("attention")))
    assert attention < matrices < everything
    assert not any(p.startswith("time_mlp") for p in everything)
    with pytest.raises(ValueError):
        G.lora_filter("bogus")


# -- latent codec ------------------------------------------------------------------------------------
def _codec(rng):
    return G.LatentCodec(rng, widths=(4, 8))


def test_codec_shapes(rng):
    codec = _codec(rng)
    x = rng.random((2, 3, 32, 32))
    assert codec.latent_shape == (4, 8, 8)
    z = G.encode_latent(codec, x, rng)
    assert z.shape == (2, 4, 8, 8)
    img = G.decode_latent(codec, z)
    assert img.shape == x.shape
    assert np.all((img > 0) & (img < 1))
    with pytest.raises(ShapeError):
        codec.encode_mean(rng.random((2, 3, 16, 16)))
    with pytest.raises(ShapeError):
        codec.decode(np.zeros((1, 4, 4, 4)))


def test_encode_latent_zero_spread_is_mean(rng):
    codec = _codec(rng)
    x = rng.random((3, 3, 32, 32))
    np.testing.assert_array_equal(G.encode_latent(codec, x, rng, sigma_override=0.0), G.latent_means(codec, x))


def test_encode_latent_monte_carlo_moments():
    rng = np.random.default_rng(3)
    codec = _codec(rng)
    x = np.repeat(rng.random((1, 3, 32, 32)), 2000, axis=0)
    z = G.encode_latent(codec, x, rng)
    mean = G.latent_means(codec, x[:1])[0]
    sigma = codec.spread(x[:1]).data[0]
    se = sigma / np.sqrt(2000)
    assert np.all(np.abs(z.mean(axis=0) - mean) < 5 * se)
    assert np.all(np.abs(z.std(axis=0) / sigma - 1) < 0.1)


def test_latent_scale_round_trips(rng):
    codec = _codec(rng)
    x = rng.random((8, 3, 32, 32))
    before = G.decode_latent(codec, G.latent_means(codec, x))
    scale = G.calibrate_latent_scale(codec, x)
    assert abs(np.std(G.latent_means(codec, x)) - 1.0) < 1e-9
    assert scale != 1.0
    np.testing.assert_allclose(G.decode_latent(codec, G.latent_means(codec, x)), before, atol=1e-12)


def test_unit_posterior_has_zero_kl():
    from gscsim.tensor import Tensor
    assert G.gaussian_kl(Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 5)))).item() == 0.0
    # KL of N(1, 1) is 0.5 per element
    assert G.gaussian_kl(Tensor(np.ones((2, 5))), Tensor(np.zeros((2, 5)))).item() == pytest.approx(2.5)


def test_codec_training_reduces_loss(rng):
    codec = _codec(rng)
    x = np.tile(rng.random((1, 3, 32, 32)), (8, 1, 1, 1))
    hist = G.train_latent_codec(codec, x, G.CodecTrainConfig(8, 1e-2, 8), rng)
    assert hist[-1] < hist[0]


def test_codec_training_rejects_empty(rng):
    with pytest.raises(ValueError):
        G.train_latent_codec(_codec(rng), np.zeros((0, 3, 32, 32)), G.CodecTrainConfig(1), rng)


def test_discriminator_variant_runs(rng):
    codec = _codec(rng)
    cfg = G.CodecTrainConfig(1, 1e-3, 4, use_discriminator=True)
    hist = G.train_latent_codec(codec, rng.random((4, 3, 32, 32)), cfg, rng)
    assert np.isfinite(hist[0])
