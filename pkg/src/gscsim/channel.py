"""Symbol-level wireless link: QAM, nearest-point quantization, correlated
Rayleigh sub-channels with sequential assignment, AWGN and MMSE equalization.

Complex vectors are numpy complex arrays here; the differentiable path in
``apply_phi`` takes paired real tensors of shape (..., 2, K).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

COVARIANCE_VARIANTS = ("rational", "as_written")


@dataclass(frozen=True, eq=False)
class Constellation:
    points: np.ndarray  # complex, shape (M,)

    @property
    def M(self) -> int:
        return self.points.shape[0]


def make_qam(M: int) -> Constellation:
    """Square M-QAM on odd-integer levels, scaled to unit mean power."""
    side = math.isqrt(M)
    if M < 4 or side * side != M or side & (side - 1):
        raise ValueError(f"square QAM needs M = 4^n, got {M}")
    levels = np.arange(-(side - 1), side, 2, dtype=np.float64)
    re, im = np.meshgrid(levels, levels, indexing="ij")
    pts = (re + 1j * im).reshape(-1)
    pts = pts / math.sqrt(np.mean(np.abs(pts) ** 2))
    return Constellation(pts)


def quantize_indices(s, C: Constellation) -> np.ndarray:
    """Index of the nearest constellation point; ties go to the lowest index."""
    s = np.asarray(s, dtype=np.complex128)
    d = np.abs(s[..., None] - C.points) ** 2
    return np.argmin(d, axis=-1)


def quantize(s, C: Constellation) -> np.ndarray:
    return C.points[quantize_indices(s, C)]


@dataclass(frozen=True)
class ChannelCondition:
    snr_db: float = 20.0
    delay_spread_s: float = 300e-9
    J: int = 120
    subcarrier_spacing_hz: float = 30e3
    avg_gain_power: float = 1.0
    covariance_variant: str = "rational"

    def __post_init__(self):
        if self.J < 1:
            raise ValueError(f"J must be >= 1, got {self.J}")
        if self.delay_spread_s < 0:
            raise ValueError("delay spread must be non-negative")
        if self.covariance_variant not in COVARIANCE_VARIANTS:
            raise ValueError(f"covariance_variant must be one of {COVARIANCE_VARIANTS}")

    @property
    def noise_power(self) -> float:
        return self.avg_gain_power / 10.0 ** (self.snr_db / 10.0)

    def replace(self, **kw) -> "ChannelCondition":
        return dataclasses.replace(self, **kw)


def build_covariance(cond: ChannelCondition) -> np.ndarray:
    j = np.arange(cond.J)
    delta = cond.subcarrier_spacing_hz * (j[:, None] - j[None, :])
    arg = 2j * np.pi * delta * cond.delay_spread_s
    if cond.covariance_variant == "rational":
        return cond.avg_gain_power / (1.0 + arg)
    return cond.avg_gain_power / np.exp(1.0 + arg)


@lru_cache(maxsize=64)
def _factor(J: int, spacing: float, spread: float, p_h: float, variant: str) -> np.ndarray:
    cond = ChannelCondition(J=J, subcarrier_spacing_hz=spacing, delay_spread_s=spread, avg_gain_power=p_h,
                            covariance_variant=variant)
    C = build_covariance(cond)
    # symmetrize away rounding asymmetry before the eigenvalue floor
    H = 0.5 * (C + C.conj().T)
    lam, V = np.linalg.eigh(H)
    if lam.min() < -1e-6 * p_h * J:
        raise np.linalg.LinAlgError(f"covariance is not positive semidefinite (min eigenvalue {lam.min():.3e})")
    lam = np.maximum(lam, 1e-12 * p_h)
    repaired = (V * lam) @ V.conj().T
    L = np.linalg.cholesky(0.5 * (repaired + repaired.conj().T))
    L.setflags(write=False)
    return L


def channel_factor(cond: ChannelCondition) -> np.ndarray:
    """Lower Cholesky factor of the (eigenvalue-floored) covariance."""
    return _factor(cond.J, cond.subcarrier_spacing_hz, cond.delay_spread_s, cond.avg_gain_power,
                   cond.covariance_variant)


def complex_normal(rng: np.random.Generator, shape, power: float = 1.0) -> np.ndarray:
    g = rng.standard_normal(tuple(shape) + (2,))
    return (g[..., 0] + 1j * g[..., 1]) * math.sqrt(power / 2.0)


def sample_channel(cond: ChannelCondition, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Gains h ~ CN(0, C): shape (J,), or (n, J) when ``n`` is given."""
    L = channel_factor(cond)
    g = complex_normal(rng, (cond.J,) if n is None else (n, cond.J))
    return g @ L.T


def symbol_gains(h: np.ndarray, K: int) -> np.ndarray:
    """Per-symbol gain under sequential assignment: symbol k uses sub-channel k mod J."""
    J = h.shape[-1]
    return h[..., np.arange(K) % J]


def transmit(s_hat, h, noise_power: float, rng: np.random.Generator | None) -> np.ndarray:
    s_hat = np.asarray(s_hat, dtype=np.complex128)
    y = symbol_gains(np.asarray(h), s_hat.shape[-1]) * s_hat
    if noise_power > 0:
        y = y + complex_normal(rng, s_hat.shape, noise_power)
    return y


def equalize(y, h, noise_power: float) -> np.ndarray:
    y = np.asarray(y, dtype=np.complex128)
    hk = symbol_gains(np.asarray(h), y.shape[-1])
    den = np.abs(hk) ** 2 + noise_power
    safe = np.where(den > 0, den, 1.0)
    return np.where(den > 0, np.conj(hk) * y / safe, 0.0)


@dataclass(frozen=True)
class TransmissionCondition:
    rate: Fraction
    condition: ChannelCondition = ChannelCondition()
    latent_dim: int = 256

    def __post_init__(self):
        object.__setattr__(self, "rate", Fraction(self.rate))
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if Fraction(self.latent_dim) / self.rate != self.K:
            raise ValueError(f"latent size {self.latent_dim} / rate {self.rate} is not an integer symbol count")

    @property
    def K(self) -> int:
        return int(Fraction(self.latent_dim) / self.rate)


@dataclass
class PhiDraw:
    """One frozen draw of the channel randomness for a batch.

    Gains (N, J), noise (N, K) and the per-element noise power (N,) the
    equalizer assumes.
    """

    h: np.ndarray
    noise: np.ndarray
    noise_power: np.ndarray


def draw_phi(cond: ChannelCondition, n: int, K: int, rng: np.random.Generator) -> PhiDraw:
    h = sample_channel(cond, rng, n)
    P = cond.noise_power
    noise = complex_normal(rng, (n, K), P) if P > 0 else np.zeros((n, K), complex)
    return PhiDraw(h, noise, np.full(n, P))


def draw_phi_mixed(conds: list[ChannelCondition], K: int, rng: np.random.Generator) -> PhiDraw:
    """Independent draw per batch element, each under its own condition."""
    h = np.stack([sample_channel(c, rng) for c in conds])
    P = np.array([c.noise_power for c in conds])
    noise = complex_normal(rng, (len(conds), K)) * np.sqrt(P)[:, None]
    return PhiDraw(h, noise, P)


def to_complex(paired: np.ndarray) -> np.ndarray:
    return paired[..., 0, :] + 1j * paired[..., 1, :]


def to_paired(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-2)


def _cmul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Complex multiply of paired tensor x (..., 2, K) by a complex constant (..., K)."""
    xr, xi = x[..., 0:1, :], x[..., 1:2, :]
    cr, ci = c.real[..., None, :], c.imag[..., None, :]
    return T.concat([xr * cr - xi * ci, xr * ci + xi * cr], axis=-2)


def apply_phi(s, tcond: TransmissionCondition, rng: np.random.Generator | None = None,
              constellation: Constellation | None = None, draw: PhiDraw | None = None,
              offset: np.ndarray | None = None, quantized: bool = True):
    """Quantize, transmit over a fresh realization, equalize.

    ``s`` is either a complex array (..., K) or a paired tensor (..., 2, K);
    the tensor path is differentiable with the quantizer passed straight
    through. ``draw`` freezes the channel randomness; ``offset`` freezes the
    straight-through offset q(s) - s (used by gradient checks).
    ``quantized=False`` sends the symbols as they are.
    """
    C = constellation or make_qam(64)
    cond = tcond.condition
    is_tensor = isinstance(s, Tensor)
    K = s.shape[-1]
    if K != tcond.K:
        raise ShapeError(f"symbol length {K} does not match K={tcond.K} for rate {tcond.rate}")
    if is_tensor and (s.ndim < 2 or s.shape[-2] != 2):
        raise ShapeError(f"paired symbols need shape (..., 2, K), got {s.shape}")
    batch = s.shape[:-2] if is_tensor else s.shape[:-1]
    n = int(np.prod(batch)) if batch else 1
    if draw is None:
        draw = draw_phi(cond, n, K, rng)
    h = draw.h.reshape(batch + (draw.h.shape[-1],))
    noise = draw.noise.reshape(batch + (K,))
    P = draw.noise_power.reshape(batch + (1,))
    if not is_tensor:
        sent = quantize(s, C) if quantized else np.asarray(s, dtype=np.complex128)
        y = symbol_gains(h, K) * sent + noise
        return equalize(y, h, P)
    u = s
    if quantized:
        if offset is None:
            offset = to_paired(quantize(to_complex(s.data), C)) - s.data
        u = s + offset
    hk = symbol_gains(h, K)
    y = _cmul_const(u, hk) + to_paired(noise)
    den = np.abs(hk) ** 2 + P
    g = np.where(den > 0, np.conj(hk) / np.where(den > 0, den, 1.0), 0.0)
    return _cmul_const(y, g)
