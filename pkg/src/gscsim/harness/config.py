"""Experiment configuration: ``[section]`` headers with ``key = value`` lines.

Unknown sections or keys are rejected, missing keys keep their defaults.
Lists are comma separated; SNR groups are separated by ``|``; rates accept
fractions such as ``16/3``.
"""
import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .. import channel as ch
from .. import deka as K
from .. import jscc as J
from ..genmodel import CodecTrainConfig, DiffusionSchedule, DiffusionTrainConfig
from . import data as D


@dataclass
class RunSection:
    run_id: str = "desk"
    seed: int = 0


@dataclass
class DataSection:
    images_per_style: int = 144
    image_size: int = 32


@dataclass
class LatentCodecSection:
    widths: tuple[int, ...] = (12, 32)
    epochs: int = 100
    lr: float = 3e-3
    batch_size: int = 32
    recon_weight: float = 1.0
    kl_weight: float = 1e-3
    use_discriminator: bool = False
    disc_weight: float = 0.1


@dataclass
class DiffusionSection:
    T: int = 1000
    T_B: int = 20
    beta_start: float = 8.5e-4
    beta_end: float = 0.012
    embed_dim: int = 32
    cloud_width: int = 48
    edge_width: int = 24
    epochs: int = 300
    lr: float = 2e-3
    batch_size: int = 32


@dataclass
class ChannelSection:
    J: int = 120
    M: int = 64
    subcarrier_spacing_hz: float = 30e3
    avg_gain_power: float = 1.0
    covariance_variant: str = "rational"


@dataclass
class JsccSection:
    width: int = 32
    objective: str = "LMSE_CML"
    eta_cml: float = 10.0
    kld_weight: float = 10.0
    kld_temperature: float = 1.0
    anneal_end: float = 1e-3
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 20
    snr0_db: float = 20.0
    delay0_ns: float = 300.0


@dataclass
class GkaSection:
    mode: str = "MAKD"
    subjects: tuple[str, ...] = tuple(s.prompt for s in D.SUBJECTS)
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
    n_eg: int = 100
    n_eg_test: int = 30


@dataclass
class TkaSection:
    rates: tuple[Fraction, ...] = tuple(Fraction(16, i) for i in range(2, 7))
    latent_dim: int = 256
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


@dataclass
class EvalSection:
    trials: int = 20


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    latent_codec: LatentCodecSection = field(default_factory=LatentCodecSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    jscc: JsccSection = field(default_factory=JsccSection)
    gka: GkaSection = field(default_factory=GkaSection)
    tka: TkaSection = field(default_factory=TkaSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived objects ------------------------------------------------------------------
    def schedule(self) -> DiffusionSchedule:
        d = self.diffusion
        return DiffusionSchedule.linear(d.T, d.beta_start, d.beta_end)

    def channel_condition(self, snr_db: float | None = None, delay_ns: float | None = None) -> ch.ChannelCondition:
        c = self.channel
        return ch.ChannelCondition(
            snr_db=self.jscc.snr0_db if snr_db is None else float(snr_db),
            delay_spread_s=(self.jscc.delay0_ns if delay_ns is None else float(delay_ns)) * 1e-9,
            J=c.J, subcarrier_spacing_hz=c.subcarrier_spacing_hz, avg_gain_power=c.avg_gain_power,
            covariance_variant=c.covariance_variant)

    def constellation(self) -> ch.Constellation:
        return ch.make_qam(self.channel.M)

    def rate_plan(self) -> J.RatePlan:
        size = self.data.image_size // 8
        return J.RatePlan(self.tka.rates, self.tka.latent_dim, size * size)

    def codec_train(self) -> CodecTrainConfig:
        c = self.latent_codec
        return CodecTrainConfig(c.epochs, c.lr, c.batch_size, c.recon_weight, c.kl_weight, c.disc_weight,
                                c.use_discriminator)

    def diffusion_train(self) -> DiffusionTrainConfig:
        d = self.diffusion
        return DiffusionTrainConfig(d.epochs, d.lr, d.batch_size)

    def objective(self, variant: str | None = None) -> J.Objective:
        j = self.jscc
        return J.Objective(variant or j.objective, j.eta_cml, j.kld_weight, j.kld_temperature, 1.0, j.anneal_end)

    def jscc_train(self) -> J.JsccTrainConfig:
        return J.JsccTrainConfig(self.jscc.epochs, self.jscc.lr, self.jscc.batch_size)

    def subjects(self) -> list[D.SubjectSpec]:
        return [D.SubjectSpec(*s.split()) for s in self.gka.subjects]

    def gka_config(self, mode: str | None = None) -> K.GkaConfig:
        g = self.gka
        return K.GkaConfig(g.n_cg, g.n_cg_test, g.metaword_epochs, g.metaword_lr, g.metaword_variance, g.lora_rank,
                           g.lora_epochs, g.lora_lr, g.lora_scope, g.batch_size, self.diffusion.T_B,
                           mode or g.mode)

    def tka_config(self, rate_mode: str | None = None) -> K.TkaConfig:
        t = self.tka
        return K.TkaConfig(self.rate_plan(), t.snr_set_db, t.delay_spreads_ns, t.groups, t.skip_groups,
                           t.group_ranks, rate_mode or t.rate_mode, t.rate_epochs, t.snr_epochs, t.lr, t.lora_lr,
                           t.batch_size, self.jscc.snr0_db, self.jscc.delay0_ns, self.channel_condition(),
                           self.objective())

    def validate(self) -> None:
        self.rate_plan()
        self.tka_config()
        self.gka_config()
        self.objective()
        self.subjects()
        self.channel_condition()
        self.constellation()
        self.schedule()
        if self.data.image_size % 8:
            raise ValueError("image_size must be a multiple of 8")
        if not 1 <= self.diffusion.T_B <= self.diffusion.T:
            raise ValueError("T_B must lie in [1, T]")
        if self.gka.n_eg < 1 or self.gka.n_eg_test < 1:
            raise ValueError("edge latent counts must be positive")


SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse_scalar(tp, text: str):
    text = text.strip()
    if tp is bool:
        low = text.lower()
        if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "yes", "1", "on")
    if tp is Fraction:
        return Fraction(text)
    return tp(text)


def _parse(tp, text: str):
    origin = typing.get_origin(tp)
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        if typing.get_origin(inner) is tuple:
            return tuple(_parse(inner, part) for part in text.split("|") if part.strip())
        sep = ";" if inner is str else ","
        return tuple(_parse_scalar(inner, part) for part in text.split(sep) if part.strip())
    return _parse_scalar(tp, text)


def _format(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return " | ".join(_format(v) for v in value)
        sep = "; " if value and isinstance(value[0], str) else ", "
        return sep.join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def loads(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        hints = typing.get_type_hints(type(target))
        for key, raw in parser.items(section):
            if key not in hints:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            try:
                setattr(target, key, _parse(hints[key], raw))
            except (ValueError, ZeroDivisionError) as exc:
                raise ValueError(f"[{section}] {key}: {exc}") from None
    cfg.validate()
    return cfg


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for f in dataclasses.fields(getattr(cfg, name)):
            lines.append(f"{f.name} = {_format(getattr(getattr(cfg, name), f.name))}")
        lines.append("")
    return "\n".join(lines)
