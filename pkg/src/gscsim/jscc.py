"""Quantized JSCC codec over the symbol-level channel, objectives and the variable-rate adapter pair."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import channel as ch
from . import nn
from . import tensor as T
from .nn import Conv2d, ConvTranspose2d, Module
from .tensor import ShapeError, Tensor

OBJECTIVES = ("LMSE_CML", "LMSE_ONLY", "LMSE_KLD", "SOFT2HARD", "NOQUANT")


# -- rate plan ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RatePlan:
    """Compression rates and their symbol lengths K_p = Z / rate_p.

    ``positions`` is the number of spatial feature positions; each complex
    feature channel contributes that many symbols.
    """

    rates: tuple[Fraction, ...]
    latent_dim: int = 256
    positions: int = 16

    def __post_init__(self):
        rates = tuple(Fraction(r) for r in self.rates)
        object.__setattr__(self, "rates", rates)
        if not rates:
            raise ValueError("rate plan is empty")
        for r in rates:
            k = Fraction(self.latent_dim) / r
            if r <= 0 or k.denominator != 1:
                raise ValueError(f"rate {r} gives non-integral symbol length {k} for Z={self.latent_dim}")
            if int(k) % self.positions:
                raise ValueError(f"symbol length {k} is not a whole number of feature channels ({self.positions} each)")

    @classmethod
    def standard(cls, latent_dim: int = 256, positions: int = 16, divisors=range(2, 7)) -> "RatePlan":
        return cls(tuple(Fraction(16, i) for i in divisors), latent_dim, positions)

    def __len__(self) -> int:
        return len(self.rates)

    def _check(self, p: int) -> None:
        if not 0 <= p < len(self.rates):
            raise IndexError(f"rate index {p} outside plan of {len(self.rates)} rates")

    def K(self, p: int) -> int:
        self._check(p)
        return int(Fraction(self.latent_dim) / self.rates[p])

    @property
    def tau_min(self) -> Fraction:
        return min(self.rates)

    @property
    def K_max(self) -> int:
        return int(Fraction(self.latent_dim) / self.tau_min)

    def complex_channels(self, p: int) -> int:
        return self.K(p) // self.positions

    @property
    def max_complex_channels(self) -> int:
        return self.K_max // self.positions

    def index_of(self, K: int) -> int:
        for p in range(len(self)):
            if self.K(p) == K:
                return p
        raise ValueError(f"symbol length {K} is not in the plan {[self.K(p) for p in range(len(self))]}")

    def tcond(self, p: int, cond: ch.ChannelCondition) -> ch.TransmissionCondition:
        return ch.TransmissionCondition(self.rates[p], cond, self.latent_dim)


# -- codec -------------------------------------------------------------------------------
def features_to_symbols(f: Tensor) -> Tensor:
    """(N, 2c, h, w) real features -> (N, 2, c*h*w): first half real, second half imaginary."""
    n, c2, h, w = f.shape
    if c2 % 2:
        raise ShapeError(f"feature channel count must be even, got {c2}")
    return f.reshape(n, 2, (c2 // 2) * h * w)


def symbols_to_features(s: Tensor, channels: int, h: int, w: int) -> Tensor:
    n = s.shape[0]
    if s.shape[1:] != (2, (channels // 2) * h * w):
        raise ShapeError(f"symbols {s.shape} do not fold into ({channels}, {h}, {w}) features")
    return s.reshape(n, channels, h, w)


class JsccCodec(Module):
    """Latent (4, 8, 8) -> features (8, 4, 4) -> 64 complex symbols, and back."""

    def __init__(self, rng: np.random.Generator, latent_channels: int = 4, width: int = 32,
                 feature_channels: int = 8, latent_size: int = 8):
        self.latent_channels = latent_channels
        self.feature_channels = feature_channels
        self.latent_size = latent_size
        self.enc1 = Conv2d(latent_channels, width, 3, rng)
        self.enc2 = Conv2d(width, width, 4, rng, stride=2, pad=1)
        self.enc3 = Conv2d(width, feature_channels, 3, rng)
        self.dec1 = Conv2d(feature_channels, width, 3, rng)
        self.dec2 = ConvTranspose2d(width, width, rng)
        self.dec3 = Conv2d(width, latent_channels, 3, rng)

    @property
    def feature_size(self) -> int:
        return self.latent_size // 2

    @property
    def K(self) -> int:
        return self.feature_channels // 2 * self.feature_size**2

    def features(self, z) -> Tensor:
        z = T.as_tensor(z)
        want = (self.latent_channels, self.latent_size, self.latent_size)
        if z.ndim != 4 or tuple(z.shape[1:]) != want:
            raise ShapeError(f"JSCC encoder expects latents (N, {want}), got {z.shape}")
        h = T.silu(self.enc1(z))
        h = T.silu(self.enc2(h))
        return self.enc3(h)

    def decode_features(self, f: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.feature_channels:
            raise ShapeError(f"JSCC decoder expects ({self.feature_channels}, h, w) features, got {f.shape}")
        h = T.silu(self.dec1(f))
        h = T.silu(self.dec2(h))
        return self.dec3(h)

    def encode(self, z) -> Tensor:
        return features_to_symbols(self.features(z))

    def decode(self, s) -> Tensor:
        s = T.as_tensor(s)
        fs = self.feature_size
        return self.decode_features(symbols_to_features(s, self.feature_channels, fs, fs))


class AdapterPair(Module):
    """1x1 conv adapters widening features to the longest-symbol layout and back."""

    def __init__(self, rng: np.random.Generator, feature_channels: int, max_complex_channels: int):
        self.max_complex_channels = max_complex_channels
        self.a_E = Conv2d(feature_channels, 2 * max_complex_channels, 1, rng)
        self.a_D = Conv2d(2 * max_complex_channels, feature_channels, 1, rng)


def cut(s_full: Tensor, keep_channels: int, positions: int) -> Tensor:
    """Keep the first ``keep_channels`` complex channels of a (N, 2, C*positions) symbol block."""
    n, two, K = s_full.shape
    c = K // positions
    if not 1 <= keep_channels <= c:
        raise ValueError(f"cannot keep {keep_channels} of {c} complex channels")
    blocks = s_full.reshape(n, 2, c, positions)[:, :, :keep_channels, :]
    return blocks.reshape(n, 2, keep_channels * positions)


def pad(s_p: Tensor, total_channels: int, positions: int) -> Tensor:
    """Append zero complex channels to restore ``total_channels``."""
    n, two, K = s_p.shape
    c = K // positions
    if c * positions != K or c > total_channels:
        raise ValueError(f"cannot pad {K} symbols to {total_channels} channels of {positions}")
    blocks = s_p.reshape(n, 2, c, positions)
    if c < total_channels:
        blocks = T.concat([blocks, np.zeros((n, 2, total_channels - c, positions))], axis=2)
    return blocks.reshape(n, 2, total_channels * positions)


def adapter_forward(codec: JsccCodec, pair: AdapterPair, plan: RatePlan, z, p: int) -> Tensor:
    plan._check(p)
    f = pair.a_E(codec.features(z))
    return cut(features_to_symbols(f), plan.complex_channels(p), plan.positions)


def adapter_backward(codec: JsccCodec, pair: AdapterPair, plan: RatePlan, s_p: Tensor, p: int) -> Tensor:
    plan._check(p)
    if s_p.shape[-1] != plan.K(p):
        raise ShapeError(f"rate {p} expects {plan.K(p)} symbols, got {s_p.shape[-1]}")
    full = pad(s_p, plan.max_complex_channels, plan.positions)
    fs = codec.feature_size
    f = symbols_to_features(full, 2 * plan.max_complex_channels, fs, fs)
    return codec.decode_features(pair.a_D(f))


# -- objectives -------------------------------------------------------------------------------
def commitment_loss(s: Tensor, s_hat) -> Tensor:
    """||s - sg(s_hat)||^2 summed per sample, averaged over the batch."""
    target = s_hat.data if isinstance(s_hat, Tensor) else np.asarray(s_hat)
    if target.shape != s.shape:
        raise ShapeError(f"commitment loss: {s.shape} vs {target.shape}")
    diff = s - T.stop_gradient(T.as_tensor(target))
    return T.tsum(T.square(diff)) * (1.0 / s.shape[0])


def _soft_assign(s: Tensor, C: ch.Constellation, temperature: float) -> Tensor:
    """p_m(k) over constellation points: (N, K, M) for paired s (N, 2, K)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    sr = s[:, 0, :].reshape(s.shape[0], -1, 1)
    si = s[:, 1, :].reshape(s.shape[0], -1, 1)
    d = T.square(sr - C.points.real) + T.square(si - C.points.imag)
    return T.softmax(d * (-1.0 / temperature), axis=-1)


def soft_assign_kld(s: Tensor, C: ch.Constellation, temperature: float = 1.0) -> Tensor:
    """KL(mean soft assignment || uniform) over the constellation."""
    p = _soft_assign(s, C, temperature)
    q = T.mean(p.reshape(-1, C.M), axis=0)
    return T.tsum(q * T.log(q * C.M + 1e-300))


def soft_quantize(s: Tensor, C: ch.Constellation, temperature: float) -> Tensor:
    p = _soft_assign(s, C, temperature)
    re = p @ C.points.real.reshape(-1, 1)
    im = p @ C.points.imag.reshape(-1, 1)
    n, K = s.shape[0], s.shape[-1]
    return T.concat([re.reshape(n, 1, K), im.reshape(n, 1, K)], axis=1)


@dataclass
class Objective:
    variant: str = "LMSE_CML"
    eta_cml: float = 10.0
    kld_weight: float = 10.0
    kld_temperature: float = 1.0
    anneal_start: float = 1.0
    anneal_end: float = 1e-3
    anneal_fraction: float = 0.9

    def __post_init__(self):
        if self.variant not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.variant!r}")
        if self.eta_cml < 0:
            raise ValueError("eta_cml must be non-negative")

    def temperature(self, epoch: int, epochs: int) -> float:
        """Exponential anneal reaching ``anneal_end`` at ``anneal_fraction`` of training, then held."""
        hold = max(1, int(math.ceil(self.anneal_fraction * epochs)) - 1)
        frac = min(1.0, epoch / hold)
        return self.anneal_start * (self.anneal_end / self.anneal_start) ** frac


def link_loss(encode: Callable[[np.ndarray], Tensor], decode: Callable[[Tensor], Tensor], z: np.ndarray,
              tcond: ch.TransmissionCondition, rng: np.random.Generator, objective: Objective,
              C: ch.Constellation, temperature: float | None = None, draw: ch.PhiDraw | None = None,
              offset: np.ndarray | None = None) -> Tensor:
    """Latent squared error through the channel plus the objective's regularizer (per-sample sums)."""
    s = encode(z)
    n = z.shape[0]
    v = objective.variant
    if v == "SOFT2HARD":
        sent = soft_quantize(s, C, temperature if temperature is not None else objective.anneal_end)
        s_rx = ch.apply_phi(sent, tcond, rng, C, draw=draw, quantized=False)
    else:
        s_rx = ch.apply_phi(s, tcond, rng, C, draw=draw, offset=offset, quantized=v != "NOQUANT")
    z_rx = decode(s_rx)
    loss = T.tsum(T.square(z_rx - z)) * (1.0 / n)
    if v == "LMSE_CML":
        s_hat = ch.to_paired(ch.quantize(ch.to_complex(s.data), C))
        loss = loss + commitment_loss(s, s_hat) * objective.eta_cml
    elif v == "LMSE_KLD":
        loss = loss + soft_assign_kld(s, C, objective.kld_temperature) * objective.kld_weight
    return loss


@dataclass
class JsccTrainConfig:
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 20


def _check(value: float, stage: str) -> None:
    if not np.isfinite(value) or value > 1e6:
        raise RuntimeError(f"{stage}: loss diverged ({value})")


def train_jscc(codec: JsccCodec, latents: np.ndarray, objective: Objective, cond: ch.ChannelCondition,
               cfg: JsccTrainConfig, rng: np.random.Generator, C: ch.Constellation | None = None,
               log: Callable[[int, float], None] | None = None) -> list[float]:
    """Train the base codec at its native rate; fresh channel per batch element."""
    if len(latents) == 0:
        raise ValueError("cannot train the JSCC codec without latents")
    C = C or ch.make_qam(64)
    tcond = ch.TransmissionCondition(Fraction(latents[0].size, codec.K), cond, latents[0].size)
    opt = nn.Adam(codec.parameters(), cfg.lr)
    history = []
    n = len(latents)
    for epoch in range(cfg.epochs):
        temp = objective.temperature(epoch, cfg.epochs)
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            zb = latents[order[i:i + cfg.batch_size]]
            loss = link_loss(codec.encode, codec.decode, zb, tcond, rng, objective, C, temp)
            _check(loss.item(), "JSCC training")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(zb)
        history.append(total / n)
        if log:
            log(epoch, history[-1])
    return history


def transmit_latents(encode: Callable, decode: Callable, latents: np.ndarray, tcond: ch.TransmissionCondition,
                     rng: np.random.Generator, C: ch.Constellation | None = None,
                     draw: ch.PhiDraw | None = None, quantized: bool = True) -> np.ndarray:
    """Inference pass: hard-quantized symbols through one channel draw per latent."""
    C = C or ch.make_qam(64)
    with T.no_grad():
        s = encode(latents).data
        rx = ch.apply_phi(ch.to_complex(s), tcond, rng, C, draw=draw, quantized=quantized)
        return decode(T.Tensor(ch.to_paired(rx))).data


def evaluate_mse(encode: Callable, decode: Callable, latents: np.ndarray, tcond: ch.TransmissionCondition,
                 rng: np.random.Generator, trials: int = 1, C: ch.Constellation | None = None,
                 quantized: bool = True) -> float:
    """Mean per-element latent MSE over ``trials`` channel draws per latent."""
    errs = []
    for _ in range(trials):
        z_rx = transmit_latents(encode, decode, latents, tcond, rng, C, quantized=quantized)
        errs.append(np.mean((z_rx - latents) ** 2))
    return float(np.mean(errs))
