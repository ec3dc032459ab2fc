"""Knowledge alignment between an edge generator/link and the cloud.

Generation side: a trainable metaword is fitted to cloud samples of a
subject, then LoRA matrices on the edge noise predictor absorb what the
metaword could not. Transmission side: a shared variable-rate adapter pair is
fine-tuned across all rates at the pretraining channel condition, then one
LoRA set per SNR group adapts the frozen result to its channel conditions.
"""
from __future__ import annotations

import contextlib
import copy
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from . import channel as ch
from . import genmodel as G
from . import jscc as J
from . import nn
from . import tensor as T
from .nn import LoraSet, MetaWord, Module

GKA_MODES = ("MAKD", "TI_ONLY", "DB_ONLY")
RATE_MODES = ("VR_ALTER", "VR_JOINT", "MI_ALTER", "MI_JOINT")


# -- generation-knowledge alignment ------------------------------------------------------------
@dataclass
class GkaConfig:
    n_cg: int = 40
    n_cg_test: int = 10
    metaword_epochs: int = 500
    metaword_lr: float = 2e-2
    metaword_variance: float = 0.02
    lora_rank: int = 8
    lora_epochs: int = 500
    lora_lr: float = 1e-3
    lora_scope: str = "matrices"
    batch_size: int = 40
    T_B: int = 20
    mode: str = "MAKD"

    def __post_init__(self):
        if self.mode not in GKA_MODES:
            raise ValueError(f"G-KA mode must be one of {GKA_MODES}, got {self.mode!r}")
        if self.lora_rank < 1 or self.n_cg < 1:
            raise ValueError("LoRA rank and N_CG must be at least 1")


@dataclass
class GkaResult:
    metaword: MetaWord
    lora: LoraSet
    history: dict[str, list[float]] = field(default_factory=dict)


def cloud_generate_samples(cloud: G.NoisePredictor, codec: G.LatentCodec, tokens, seeds, sched: G.DiffusionSchedule,
                           T_B: int) -> np.ndarray:
    """Decoded cloud images for a plain prompt, one per seed."""
    z = G.generate(cloud, tokens, G.seed_noise(seeds, codec.latent_shape), sched, T_B)
    return G.decode_latent(codec, z)


def _prompt_batch(tokens, n: int) -> np.ndarray:
    return np.repeat(np.atleast_2d(np.asarray(tokens, dtype=np.int64)), n, axis=0)


def train_metaword(edge: G.NoisePredictor, latents: np.ndarray, tokens, metaword: MetaWord,
                   sched: G.DiffusionSchedule, cfg: GkaConfig, rng: np.random.Generator,
                   log: Callable[[int, float], None] | None = None) -> list[float]:
    """Fit the metaword embedding on encoded cloud samples with the edge predictor frozen."""
    train = G.DiffusionTrainConfig(cfg.metaword_epochs, cfg.metaword_lr, cfg.batch_size)
    return G.train_noise_predictor(edge, latents, _prompt_batch(tokens, len(latents)), sched, train, rng,
                                   trainable="metaword", metaword=metaword, log=log)


def train_gka_lora(edge: G.NoisePredictor, latents: np.ndarray, tokens, metaword: MetaWord, lora: LoraSet,
                   sched: G.DiffusionSchedule, cfg: GkaConfig, rng: np.random.Generator,
                   log: Callable[[int, float], None] | None = None) -> list[float]:
    """Distil the remaining gap into LoRA matrices; the metaword stays fixed."""
    train = G.DiffusionTrainConfig(cfg.lora_epochs, cfg.lora_lr, cfg.batch_size)
    return G.train_noise_predictor(edge, latents, _prompt_batch(tokens, len(latents)), sched, train, rng,
                                   trainable="lora", lora=lora, metaword=metaword, log=log)


def init_metaword(edge: G.NoisePredictor, cfg: GkaConfig, rng: np.random.Generator) -> MetaWord:
    return MetaWord.random(edge.embed_dim, rng, cfg.metaword_variance)


def run_gka(edge: G.NoisePredictor, codec: G.LatentCodec, cloud_samples: np.ndarray, tokens,
            sched: G.DiffusionSchedule, cfg: GkaConfig, rng: np.random.Generator,
            metaword: MetaWord | None = None, log: Callable[[str, int, float], None] | None = None) -> GkaResult:
    """MAKD = metaword then LoRA; TI_ONLY stops after the metaword; DB_ONLY trains LoRA on the random init.

    ``metaword`` lets callers supply the starting embedding (e.g. to share a
    trained metaword between the TI and MAKD arms).
    """
    latents = G.encode_latent(codec, cloud_samples, rng)
    mw = metaword if metaword is not None else init_metaword(edge, cfg, rng)
    history: dict[str, list[float]] = {}

    def stage_log(stage):
        return (lambda e, v: log(stage, e, v)) if log else None

    if cfg.mode in ("MAKD", "TI_ONLY"):
        history["metaword"] = train_metaword(edge, latents, tokens, mw, sched, cfg, rng, stage_log("metaword"))
    lora: LoraSet = {}
    if cfg.mode in ("MAKD", "DB_ONLY"):
        lora = nn.make_lora_set(edge, cfg.lora_rank, rng, G.lora_filter(cfg.lora_scope))
        history["lora"] = train_gka_lora(edge, latents, tokens, mw, lora, sched, cfg, rng, stage_log("lora"))
    return GkaResult(mw, lora, history)


def generate_edge_latents(edge: G.NoisePredictor, gka: GkaResult, tokens, seeds, sched: G.DiffusionSchedule,
                          T_B: int, latent_shape=(4, 8, 8)) -> np.ndarray:
    return G.generate(edge, tokens, G.seed_noise(seeds, latent_shape), sched, T_B, metaword=gka.metaword,
                      lora=gka.lora or None)


# -- transmission-knowledge alignment -------------------------------------------------------------
@dataclass
class TkaConfig:
    plan: J.RatePlan = field(default_factory=J.RatePlan.standard)
    snr_set_db: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0)
    delay_spreads_ns: tuple[float, ...] = (30.0, 100.0, 300.0, 1000.0)
    groups: tuple[tuple[float, ...], ...] = ((0.0, 5.0), (10.0, 15.0), (20.0, 25.0))
    skip_groups: tuple[int, ...] = (2,)
    group_ranks: tuple[int, ...] = (8, 8, 8)
    rate_mode: str = "VR_ALTER"
    rate_epochs: int = 300
    snr_epochs: int = 300
    lr: float = 1e-3
    lora_lr: float = 3e-3
    batch_size: int = 50
    snr0_db: float = 20.0
    delay0_ns: float = 300.0
    base: ch.ChannelCondition = ch.ChannelCondition()
    objective: J.Objective = field(default_factory=J.Objective)

    def __post_init__(self):
        if self.rate_mode not in RATE_MODES:
            raise ValueError(f"rate mode must be one of {RATE_MODES}, got {self.rate_mode!r}")
        flat = [g for grp in self.groups for g in grp]
        if any(len(g) == 0 for g in self.groups):
            raise ValueError("every SNR group must be non-empty")
        if sorted(flat) != sorted(self.snr_set_db) or len(set(flat)) != len(flat):
            raise ValueError(f"SNR groups {self.groups} do not partition the SNR set {self.snr_set_db}")
        if len(self.group_ranks) != len(self.groups):
            raise ValueError("need one LoRA rank per SNR group")

    def condition(self, snr_db: float, delay_ns: float) -> ch.ChannelCondition:
        return self.base.replace(snr_db=float(snr_db), delay_spread_s=float(delay_ns) * 1e-9)

    @property
    def pretrain_condition(self) -> ch.ChannelCondition:
        return self.condition(self.snr0_db, self.delay0_ns)

    def group_of(self, snr_db: float) -> int:
        for g, members in enumerate(self.groups):
            if any(abs(snr_db - m) < 1e-9 for m in members):
                return g
        raise ValueError(f"SNR {snr_db} dB is not in any configured group {self.groups}")


class LinkModel(Module):
    """JSCC codec plus its adapter pairs (one shared pair, or one per rate)."""

    def __init__(self, codec: J.JsccCodec, adapters: list[J.AdapterPair]):
        self.codec = codec
        self.adapters = adapters

    def pair(self, p: int) -> J.AdapterPair:
        return self.adapters[0] if len(self.adapters) == 1 else self.adapters[p]

    def encoder(self, plan: J.RatePlan, p: int) -> Callable:
        return lambda z: J.adapter_forward(self.codec, self.pair(p), plan, z, p)

    def decoder(self, plan: J.RatePlan, p: int) -> Callable:
        return lambda s: J.adapter_backward(self.codec, self.pair(p), plan, s, p)


@dataclass
class TkaResult:
    link: LinkModel
    cfg: TkaConfig
    group_loras: dict[int, LoraSet] = field(default_factory=dict)
    history: dict[str, list[float]] = field(default_factory=dict)

    def lora_for(self, snr_db: float) -> LoraSet | None:
        return self.group_loras.get(self.cfg.group_of(snr_db))

    @contextlib.contextmanager
    def at_snr(self, snr_db: float):
        """The link with the LoRA set of the SNR's group attached (none for untrained groups)."""
        with nn.attached(self.link, self.lora_for(snr_db)):
            yield self.link


def make_link(codec: J.JsccCodec, plan: J.RatePlan, mode: str, rng: np.random.Generator) -> LinkModel:
    """Copy the pretrained codec and allocate one shared adapter pair (VR) or one per rate (MI)."""
    count = 1 if mode.startswith("VR") else len(plan)
    pairs = [J.AdapterPair(rng, codec.feature_channels, plan.max_complex_channels) for _ in range(count)]
    return LinkModel(copy.deepcopy(codec), pairs)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def rate_loss(link: LinkModel, plan: J.RatePlan, p: int, z: np.ndarray, cond: ch.ChannelCondition,
              rng: np.random.Generator, objective: J.Objective, C: ch.Constellation,
              draw: ch.PhiDraw | None = None, offset: np.ndarray | None = None) -> T.Tensor:
    return J.link_loss(link.encoder(plan, p), link.decoder(plan, p), z, plan.tcond(p, cond), rng, objective, C,
                       draw=draw, offset=offset)


def vgsa_rate_stage(codec: J.JsccCodec, latents: np.ndarray, cfg: TkaConfig, rng: np.random.Generator,
                    C: ch.Constellation | None = None,
                    log: Callable[[int, int, float], None] | None = None) -> TkaResult:
    """Fine-tune codec and adapters across every rate at the pretraining condition.

    ALTER modes take one optimizer step per rate loss in round-robin order;
    JOINT modes take one step on the sum. Both see each batch once per rate.
    """
    C = C or ch.make_qam(64)
    plan = cfg.plan
    link = make_link(codec, plan, cfg.rate_mode, rng)
    opt = nn.Adam(link.parameters(), cfg.lr)
    cond = cfg.pretrain_condition
    alternate = cfg.rate_mode.endswith("ALTER")
    history = {f"rate{p}": [] for p in range(len(plan))}
    for epoch in range(cfg.rate_epochs):
        sums = np.zeros(len(plan))
        for idx in _batches(len(latents), cfg.batch_size, rng):
            z = latents[idx]
            if alternate:
                for p in range(len(plan)):
                    loss = rate_loss(link, plan, p, z, cond, rng, cfg.objective, C)
                    J._check(loss.item(), f"rate stage (rate {p})")
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    sums[p] += loss.item() * len(idx)
            else:
                losses = [rate_loss(link, plan, p, z, cond, rng, cfg.objective, C) for p in range(len(plan))]
                total = losses[0]
                for extra in losses[1:]:
                    total = total + extra
                J._check(total.item(), "rate stage (joint)")
                opt.zero_grad()
                total.backward()
                opt.step()
                sums += np.array([l.item() for l in losses]) * len(idx)
        for p in range(len(plan)):
            history[f"rate{p}"].append(sums[p] / len(latents))
            if log:
                log(epoch, p, history[f"rate{p}"][-1])
    return TkaResult(link, cfg, {}, history)


def group_conditions(cfg: TkaConfig, g: int, n: int, rng: np.random.Generator) -> list[ch.ChannelCondition]:
    """One (SNR from group g, delay spread from the set) pair per batch element, drawn uniformly."""
    snrs = rng.choice(np.asarray(cfg.groups[g], dtype=np.float64), size=n)
    spreads = rng.choice(np.asarray(cfg.delay_spreads_ns, dtype=np.float64), size=n)
    return [cfg.condition(s, w) for s, w in zip(snrs, spreads)]


def snr_group_loss(result: TkaResult, g: int, z: np.ndarray, rng: np.random.Generator, C: ch.Constellation,
                   draws: list[ch.PhiDraw] | None = None, offsets: list[np.ndarray] | None = None) -> T.Tensor:
    """Sum over rates of the link loss under mixed conditions from group g."""
    cfg, plan = result.cfg, result.cfg.plan
    total = None
    for p in range(len(plan)):
        draw = draws[p] if draws else ch.draw_phi_mixed(group_conditions(cfg, g, len(z), rng), plan.K(p), rng)
        off = offsets[p] if offsets else None
        loss = rate_loss(result.link, plan, p, z, cfg.pretrain_condition, rng, cfg.objective, C, draw, off)
        total = loss if total is None else total + loss
    return total


def vgsa_snr_stage(result: TkaResult, latents: np.ndarray, rng: np.random.Generator,
                   C: ch.Constellation | None = None,
                   log: Callable[[int, int, float], None] | None = None) -> TkaResult:
    """Train one LoRA set (codec and adapters) per non-skipped SNR group on top of the frozen link."""
    C = C or ch.make_qam(64)
    cfg = result.cfg
    for g in range(len(cfg.groups)):
        if g in cfg.skip_groups:
            continue
        lora = nn.make_lora_set(result.link, cfg.group_ranks[g], rng)
        opt = nn.Adam(nn.lora_parameters(lora), cfg.lora_lr)
        hist = result.history.setdefault(f"group{g}", [])
        with nn.frozen(result.link), nn.attached(result.link, lora):
            for epoch in range(cfg.snr_epochs):
                total = 0.0
                for idx in _batches(len(latents), cfg.batch_size, rng):
                    loss = snr_group_loss(result, g, latents[idx], rng, C)
                    J._check(loss.item(), f"SNR stage (group {g})")
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    total += loss.item() * len(idx)
                hist.append(total / len(latents))
                if log:
                    log(epoch, g, hist[-1])
        result.group_loras[g] = lora
    return result


def link_transmit(result: TkaResult, latents: np.ndarray, p: int, cond: ch.ChannelCondition,
                  rng: np.random.Generator, C: ch.Constellation | None = None,
                  draw: ch.PhiDraw | None = None) -> np.ndarray:
    """Received latents at rate p under ``cond``, with the group LoRA for its SNR attached."""
    plan = result.cfg.plan
    with result.at_snr(cond.snr_db) as link:
        return J.transmit_latents(link.encoder(plan, p), link.decoder(plan, p), latents, plan.tcond(p, cond),
                                  rng, C, draw=draw)


def gsc_forward(edge: G.NoisePredictor, codec: G.LatentCodec, gka: GkaResult, tka: TkaResult, tokens, seeds,
                p: int, cond: ch.ChannelCondition, sched: G.DiffusionSchedule, T_B: int,
                channel_rng: np.random.Generator, C: ch.Constellation | None = None) -> np.ndarray:
    """Edge generation, JSCC at rate p over the channel, latent decoding."""
    tka.cfg.plan._check(p)
    snrs = tka.cfg.snr_set_db
    if not any(abs(cond.snr_db - s) < 1e-9 for s in snrs):
        raise ValueError(f"SNR {cond.snr_db} dB is outside the configured grid {snrs}")
    z = generate_edge_latents(edge, gka, tokens, seeds, sched, T_B, codec.latent_shape)
    z_rx = link_transmit(tka, z, p, cond, channel_rng, C)
    return G.decode_latent(codec, z_rx)
