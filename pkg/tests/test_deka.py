import numpy as np
import pytest

from gscsim import channel as ch
from gscsim import deka as K
from gscsim import genmodel as G
from gscsim import jscc as J
from gscsim import nn
from gscsim import tensor as T

SCHED = G.DiffusionSchedule.linear(50)
QAM64 = ch.make_qam(64)


def _small_tka(**kw):
    base = dict(rate_epochs=1, snr_epochs=1, batch_size=4, group_ranks=(2, 2, 2))
    base.update(kw)
    return K.TkaConfig(**base)


@pytest.fixture(scope="module")
def models():
    rng = np.random.default_rng(5)
    return {
        "edge": G.NoisePredictor(rng, 8, width=8, embed_dim=8, attn_dim=8),
        "codec": G.LatentCodec(rng, widths=(4, 8)),
        "jscc": J.JsccCodec(rng, width=6),
    }


@pytest.fixture(scope="module")
def tka(models):
    rng = np.random.default_rng(6)
    latents = rng.standard_normal((6, 4, 8, 8))
    res = K.vgsa_rate_stage(models["jscc"], latents, _small_tka(), rng)
    return K.vgsa_snr_stage(res, latents, rng)


# -- configs --------------------------------------------------------------------------------------
def test_gka_config_validation():
    with pytest.raises(ValueError):
        K.GkaConfig(mode="OTHER")
    with pytest.raises(ValueError):
        K.GkaConfig(lora_rank=0)


def test_tka_config_validation():
    with pytest.raises(ValueError):
        K.TkaConfig(rate_mode="VR")
    with pytest.raises(ValueError):
        K.TkaConfig(groups=((0.0, 5.0), (10.0,), (20.0, 25.0)))  # 15 dB missing
    with pytest.raises(ValueError):
        K.TkaConfig(groups=((0.0, 5.0, 10.0), (10.0, 15.0), (20.0, 25.0)))
    with pytest.raises(ValueError):
        K.TkaConfig(groups=((0.0, 5.0), (), (10.0, 15.0, 20.0, 25.0)))
    with pytest.raises(ValueError):
        K.TkaConfig(group_ranks=(8, 8))


def test_group_lookup():
    cfg = K.TkaConfig()
    assert [cfg.group_of(s) for s in cfg.snr_set_db] == [0, 0, 1, 1, 2, 2]
    with pytest.raises(ValueError, match="7.5"):
        cfg.group_of(7.5)


def test_pretrain_condition():
    cond = K.TkaConfig().pretrain_condition
    assert cond.snr_db == 20.0
    assert cond.delay_spread_s == pytest.approx(300e-9)


# -- generation alignment -----------------------------------------------------------------------------
def _gka(models, mode, metaword=None, epochs=1):
    rng = np.random.default_rng(8)
    cfg = K.GkaConfig(n_cg=2, metaword_epochs=epochs, lora_epochs=epochs, lora_rank=2, batch_size=2, T_B=2,
                      mode=mode)
    samples = rng.random((2, 3, 32, 32))
    return K.run_gka(models["edge"], models["codec"], samples, [0, 1, 2, 3], SCHED, cfg, rng, metaword)


def test_ti_only_has_no_lora(models):
    res = _gka(models, "TI_ONLY")
    assert res.lora == {}
    assert "metaword" in res.history and "lora" not in res.history


def test_db_only_keeps_metaword_init(models):
    mw = nn.MetaWord.random(8, np.random.default_rng(0))
    init = mw.embedding.data.copy()
    res = _gka(models, "DB_ONLY", mw)
    np.testing.assert_array_equal(res.metaword.embedding.data, init)
    assert res.lora and "metaword" not in res.history


def test_makd_trains_both_and_leaves_edge_untouched(models):
    before = models["edge"].state_dict()
    mw = nn.MetaWord.random(8, np.random.default_rng(0))
    init = mw.embedding.data.copy()
    res = _gka(models, "MAKD", mw)
    assert not np.array_equal(res.metaword.embedding.data, init)
    assert res.lora
    for k, v in models["edge"].state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_edge_latents_deterministic(models):
    res = _gka(models, "MAKD")
    a = K.generate_edge_latents(models["edge"], res, [0, 1], [3, 4], SCHED, 2)
    b = K.generate_edge_latents(models["edge"], res, [0, 1], [3, 4], SCHED, 2)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (2, 4, 8, 8)


# -- transmission alignment ---------------------------------------------------------------------------
@pytest.mark.parametrize("mode,count", [("VR_ALTER", 1), ("VR_JOINT", 1), ("MI_ALTER", 5), ("MI_JOINT", 5)])
def test_adapter_allocation(models, mode, count):
    link = K.make_link(models["jscc"], J.RatePlan.standard(), mode, np.random.default_rng(0))
    assert len(link.adapters) == count
    assert link.codec is not models["jscc"]


@pytest.mark.parametrize("mode", K.RATE_MODES)
def test_rate_stage_modes_run(models, mode):
    rng = np.random.default_rng(1)
    before = models["jscc"].state_dict()
    res = K.vgsa_rate_stage(models["jscc"], rng.standard_normal((4, 4, 8, 8)), _small_tka(rate_mode=mode), rng)
    assert sorted(res.history) == [f"rate{p}" for p in range(5)]
    assert all(np.isfinite(h[0]) for h in res.history.values())
    for k, v in models["jscc"].state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_snr_stage_freezes_link(models):
    rng = np.random.default_rng(2)
    latents = rng.standard_normal((4, 4, 8, 8))
    res = K.vgsa_rate_stage(models["jscc"], latents, _small_tka(), rng)
    before = res.link.state_dict()
    K.vgsa_snr_stage(res, latents, rng)
    for k, v in res.link.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    assert sorted(res.group_loras) == [0, 1]


def test_skipped_group_transmits_with_base_link(tka):
    z = np.random.default_rng(3).standard_normal((2, 4, 8, 8))
    cond = tka.cfg.condition(25.0, 300.0)
    assert tka.lora_for(25.0) is None
    out = K.link_transmit(tka, z, 1, cond, np.random.default_rng(9))
    plan = tka.cfg.plan
    base = J.transmit_latents(tka.link.encoder(plan, 1), tka.link.decoder(plan, 1), z, plan.tcond(1, cond),
                              np.random.default_rng(9))
    np.testing.assert_array_equal(out, base)


def test_trained_group_uses_its_lora(tka):
    z = np.random.default_rng(3).standard_normal((2, 4, 8, 8))
    cond = tka.cfg.condition(5.0, 300.0)
    assert tka.lora_for(5.0) is tka.group_loras[0]
    out = K.link_transmit(tka, z, 1, cond, np.random.default_rng(9))
    plan = tka.cfg.plan
    base = J.transmit_latents(tka.link.encoder(plan, 1), tka.link.decoder(plan, 1), z, plan.tcond(1, cond),
                              np.random.default_rng(9))
    assert not np.array_equal(out, base)


def test_group_conditions_stay_in_group():
    cfg = K.TkaConfig()
    conds = K.group_conditions(cfg, 1, 200, np.random.default_rng(0))
    assert {c.snr_db for c in conds} == {10.0, 15.0}
    assert {round(c.delay_spread_s * 1e9) for c in conds} == {30, 100, 300, 1000}


def test_snr_group_loss_gradient(tka):
    rng = np.random.default_rng(4)
    cfg, plan = tka.cfg, tka.cfg.plan
    z = rng.standard_normal((2, 4, 8, 8))
    lora = nn.lora_from_state(nn.lora_state(tka.group_loras[0]))
    for ad in lora.values():
        ad.B.data = rng.standard_normal(ad.B.shape) * 0.01
    draws = [ch.draw_phi_mixed(K.group_conditions(cfg, 0, 2, rng), plan.K(p), rng) for p in range(len(plan))]
    with nn.attached(tka.link, lora), T.no_grad():
        offsets = []
        for p in range(len(plan)):
            s = tka.link.encoder(plan, p)(z).data
            offsets.append(ch.to_paired(ch.quantize(ch.to_complex(s), QAM64)) - s)
    params = [lora["codec.dec1"].B, lora["codec.enc3"].A]
    with nn.attached(tka.link, lora):
        err = T.parameters_fd_check(lambda: K.snr_group_loss(tka, 0, z, rng, QAM64, draws, offsets), params,
                                    per_param=4)
    assert err < 1e-4


def test_gsc_forward_deterministic_and_seeded(models, tka):
    gka = _gka(models, "TI_ONLY")
    cond = tka.cfg.condition(10.0, 100.0)

    def run(seeds, channel_seed):
        return K.gsc_forward(models["edge"], models["codec"], gka, tka, [0, 1], seeds, 0, cond, SCHED, 2,
                             np.random.default_rng(channel_seed))

    a = run([1, 2], 0)
    np.testing.assert_array_equal(a, run([1, 2], 0))
    assert a.shape == (2, 3, 32, 32)
    assert not np.array_equal(a, run([1, 3], 0))
    assert not np.array_equal(a, run([1, 2], 1))


def test_gsc_forward_rejects_off_grid_snr(models, tka):
    gka = _gka(models, "TI_ONLY")
    with pytest.raises(ValueError, match="outside"):
        K.gsc_forward(models["edge"], models["codec"], gka, tka, [0], [1], 0, tka.cfg.condition(12.0, 100.0),
                      SCHED, 2, np.random.default_rng(0))
    with pytest.raises(IndexError):
        K.gsc_forward(models["edge"], models["codec"], gka, tka, [0], [1], 9, tka.cfg.condition(10.0, 100.0),
                      SCHED, 2, np.random.default_rng(0))
