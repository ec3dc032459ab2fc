"""Toy latent codec and prompt-conditioned latent diffusion generator."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .nn import Buffer, Conv2d, ConvTranspose2d, CrossAttention, Dense, Embedding, MetaWord, Module
from .tensor import ShapeError, Tensor


class TrainingDiverged(RuntimeError):
    pass


def _check_loss(value: float, stage: str, limit: float = 1e6) -> None:
    if not np.isfinite(value) or value > limit:
        raise TrainingDiverged(f"{stage}: loss diverged ({value})")


# -- latent codec --------------------------------------------------------------------
class LatentCodec(Module):
    """Variational image codec: 32x32 images <-> 8x8x4 latents via two stride-2 stages."""

    def __init__(self, rng: np.random.Generator, image_channels: int = 3, latent_channels: int = 4,
                 widths: tuple[int, int] = (12, 32), image_size: int = 32):
        c1, c2 = widths
        self.image_channels = image_channels
        self.latent_channels = latent_channels
        self.image_size = image_size
        self.enc_in = Conv2d(image_channels, c1, 3, rng)
        self.enc_down1 = Conv2d(c1, c2, 4, rng, stride=2, pad=1)
        self.enc_down2 = Conv2d(c2, c2, 4, rng, stride=2, pad=1)
        self.enc_mean = Conv2d(c2, latent_channels, 1, rng)
        self.enc_logstd = Conv2d(c2, latent_channels, 1, rng, std=1e-3)
        self.dec_in = Conv2d(latent_channels, c2, 3, rng)
        self.dec_up1 = ConvTranspose2d(c2, c2, rng)
        self.dec_up2 = ConvTranspose2d(c2, c1, rng)
        self.dec_out = Conv2d(c1, image_channels, 3, rng)
        # rescales latents to roughly unit variance once training is done
        self.latent_scale = Buffer(np.ones(1))

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = self.image_size // 4
        return self.latent_channels, s, s

    def _check_image(self, x) -> None:
        want = (self.image_channels, self.image_size, self.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise ShapeError(f"expected images (N, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")

    def encode_stats(self, x) -> tuple[Tensor, Tensor]:
        """Unscaled posterior mean and log-std."""
        x = T.as_tensor(x)
        self._check_image(x)
        h = T.silu(self.enc_in(x))
        h = T.silu(self.enc_down1(h))
        h = T.silu(self.enc_down2(h))
        return self.enc_mean(h), self.enc_logstd(h)

    def encode_mean(self, x) -> Tensor:
        return self.encode_stats(x)[0] * self.latent_scale.data[0]

    def spread(self, x) -> Tensor:
        return T.exp(self.encode_stats(x)[1]) * self.latent_scale.data[0]

    def decode(self, z) -> Tensor:
        z = T.as_tensor(z)
        if z.ndim != 4 or tuple(z.shape[1:]) != self.latent_shape:
            raise ShapeError(f"expected latents (N, {self.latent_shape}), got {z.shape}")
        h = T.silu(self.dec_in(z * (1.0 / self.latent_scale.data[0])))
        h = T.silu(self.dec_up1(h))
        h = T.silu(self.dec_up2(h))
        return T.sigmoid(self.dec_out(h))


def encode_latent(codec: LatentCodec, x, rng: np.random.Generator, sigma_override: float | None = None) -> np.ndarray:
    """z = mean(x) + eps * sigma(x)."""
    with T.no_grad():
        m, logs = codec.encode_stats(x)
    scale = codec.latent_scale.data[0]
    sigma = np.exp(logs.data) * scale if sigma_override is None else np.full(m.shape, sigma_override)
    return m.data * scale + rng.standard_normal(m.shape) * sigma


def latent_means(codec: LatentCodec, x, batch: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch):
            out.append(codec.encode_mean(x[i:i + batch]).data)
    return np.concatenate(out)


def decode_latent(codec: LatentCodec, z, batch: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(z), batch):
            out.append(codec.decode(z[i:i + batch]).data)
    return np.concatenate(out)


def gaussian_kl(mean: Tensor, logstd: Tensor) -> Tensor:
    """KL(N(m, s^2) || N(0, 1)) summed over latent elements, averaged over the batch."""
    var = T.exp(logstd * 2.0)
    per = (T.square(mean) + var - 1.0 - logstd * 2.0) * 0.5
    return T.tsum(per) * (1.0 / mean.shape[0])


class Discriminator(Module):
    """Tiny 3-layer conv critic for the optional adversarial term."""

    def __init__(self, rng: np.random.Generator, image_channels: int = 3, width: int = 16):
        self.c1 = Conv2d(image_channels, width, 4, rng, stride=2, pad=1)
        self.c2 = Conv2d(width, width, 4, rng, stride=2, pad=1)
        self.c3 = Conv2d(width, 1, 3, rng)

    def __call__(self, x) -> Tensor:
        h = T.silu(self.c1(x))
        h = T.silu(self.c2(h))
        return T.mean(self.c3(h), axis=(1, 2, 3))


def _softplus(x: Tensor) -> Tensor:
    # log(1 + e^x) = relu(x) + log(1 + e^-|x|)
    return T.relu(x) + T.log(T.exp(-T.sqrt(T.square(x) + 1e-12)) + 1.0)


@dataclass
class CodecTrainConfig:
    epochs: int = 200
    lr: float = 2e-3
    batch_size: int = 32
    recon_weight: float = 1.0
    kl_weight: float = 1e-3
    disc_weight: float = 0.1
    use_discriminator: bool = False


def codec_loss(codec: LatentCodec, x: np.ndarray, rng: np.random.Generator, cfg: CodecTrainConfig,
               disc: Discriminator | None = None, eps: np.ndarray | None = None) -> Tensor:
    """Pixel squared error of a reparameterized sample plus weighted KL (and adversarial term).

    Both terms are per-sample sums averaged over the batch.
    """
    m, logs = codec.encode_stats(x)
    if eps is None:
        eps = rng.standard_normal(m.shape)
    z = (m + T.exp(logs) * eps) * codec.latent_scale.data[0]
    xr = codec.decode(z)
    recon = T.tsum(T.square(xr - x)) * (1.0 / x.shape[0])
    loss = recon * cfg.recon_weight + gaussian_kl(m, logs) * cfg.kl_weight
    if disc is not None:
        loss = loss + T.mean(_softplus(-disc(xr))) * cfg.disc_weight
    return loss


def train_latent_codec(codec: LatentCodec, images: np.ndarray, cfg: CodecTrainConfig, rng: np.random.Generator,
                       log: Callable[[int, float], None] | None = None) -> list[float]:
    if len(images) == 0:
        raise ValueError("cannot train the latent codec on an empty dataset")
    opt = nn.Adam(codec.parameters(), cfg.lr)
    disc = Discriminator(rng, codec.image_channels) if cfg.use_discriminator else None
    dopt = nn.Adam(disc.parameters(), cfg.lr) if disc else None
    history = []
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            xb = images[order[i:i + cfg.batch_size]]
            if disc is not None:
                with T.no_grad():
                    fake = codec.decode(encode_latent(codec, xb, rng)).data
                dloss = T.mean(_softplus(-disc(xb))) + T.mean(_softplus(disc(fake)))
                dopt.zero_grad()
                dloss.backward()
                dopt.step()
            loss = codec_loss(codec, xb, rng, cfg, disc)
            _check_loss(loss.item(), "latent codec")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(xb)
        history.append(total / n)
        if log:
            log(epoch, history[-1])
    return history


def calibrate_latent_scale(codec: LatentCodec, images: np.ndarray) -> float:
    """Set the latent scale so encoded means have unit standard deviation."""
    codec.latent_scale.data[:] = 1.0
    std = float(np.std(latent_means(codec, images)))
    codec.latent_scale.data[:] = 1.0 / max(std, 1e-8)
    return codec.latent_scale.data[0]


# -- diffusion schedule ----------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    betas: np.ndarray  # beta_1..beta_T at index 0..T-1
    alphas: np.ndarray  # alpha_0..alpha_T, alpha_0 = 1

    @classmethod
    def from_betas(cls, betas) -> "DiffusionSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0 or np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must be a non-empty vector with entries in (0, 1)")
        alphas = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(betas, alphas)

    @classmethod
    def linear(cls, T_steps: int, beta_start: float = 8.5e-4, beta_end: float = 0.012) -> "DiffusionSchedule":
        return cls.from_betas(np.linspace(beta_start, beta_end, T_steps))

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check_t(self, t, lo: int) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < lo) or np.any(t > self.T) or not np.issubdtype(t.dtype, np.integer):
            raise ValueError(f"step index must be an integer in [{lo}, {self.T}], got {t}")
        return t


def forward_diffuse(z0, t, eps, sched: DiffusionSchedule) -> np.ndarray:
    """Closed-form noising; ``t`` may be a scalar or one index per batch row."""
    t = sched._check_t(t, 1)
    a = sched.alphas[t].reshape(np.shape(t) + (1,) * (np.ndim(z0) - np.ndim(t)))
    return np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps


def diffuse_step(z_prev, t: int, eps, sched: DiffusionSchedule) -> np.ndarray:
    """One incremental noising step from t-1 to t."""
    sched._check_t(t, 1)
    b = sched.betas[t - 1]
    return np.sqrt(1.0 - b) * z_prev + np.sqrt(b) * eps


def ddim_step(z_t, t: int, t_prev: int, eps_hat, sched: DiffusionSchedule) -> np.ndarray:
    """Deterministic backward step from index t to t_prev (t_prev == t is the identity)."""
    sched._check_t(t, 0)
    sched._check_t(t_prev, 0)
    if t_prev > t:
        raise ValueError(f"backward step needs t_prev <= t, got {t_prev} > {t}")
    a_t, a_p = sched.alphas[t], sched.alphas[t_prev]
    ratio = a_p / a_t
    return math.sqrt(ratio) * z_t + (math.sqrt(1.0 - a_p) - math.sqrt((1.0 - a_t) * ratio)) * eps_hat


def sampling_steps(T_steps: int, T_B: int) -> list[int]:
    """T_B uniformly spaced indices from T downwards, followed by 0."""
    if not 1 <= T_B <= T_steps:
        raise ValueError(f"T_B must lie in [1, {T_steps}], got {T_B}")
    steps = [int(round(T_steps * i / T_B)) for i in range(T_B, 0, -1)]
    return steps + [0]


# -- noise predictor -------------------------------------------------------------------
class ResBlock(Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, rng: np.random.Generator):
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.temb = Dense(temb_dim, cout, rng)
        self.conv2 = Conv2d(cout, cout, 3, rng, std=0.3 / math.sqrt(cout * 9))
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(T.silu(x))
        h = h + self.temb(temb).reshape(temb.shape[0], -1, 1, 1)
        h = self.conv2(T.silu(h))
        return (x if self.skip is None else self.skip(x)) + h


class AttnBlock(Module):
    """Residual cross-attention from spatial positions to prompt tokens."""

    def __init__(self, channels: int, context_dim: int, rng: np.random.Generator, attn_dim: int = 32):
        self.attn = CrossAttention(channels, context_dim, rng, attn_dim)

    def __call__(self, x: Tensor, context: Tensor, mask=None) -> Tensor:
        n, c, h, w = x.shape
        q = x.reshape(n, c, h * w).transpose((0, 2, 1))
        out = self.attn(q, context, mask).transpose((0, 2, 1)).reshape(n, c, h, w)
        return x + out


class NoisePredictor(Module):
    """Two-resolution U-Net predicting the injected noise from (latent, step, prompt)."""

    def __init__(self, rng: np.random.Generator, vocab_size: int, latent_channels: int = 4, width: int = 32,
                 embed_dim: int = 32, attn_dim: int = 32):
        C = width
        tdim = 2 * embed_dim
        self.latent_channels = latent_channels
        self.step_dim = embed_dim
        self.token_embed = Embedding(vocab_size, embed_dim, rng)
        self.time_mlp1 = Dense(embed_dim, tdim, rng)
        self.time_mlp2 = Dense(tdim, tdim, rng)
        self.conv_in = Conv2d(latent_channels, C, 3, rng)
        self.down_res = ResBlock(C, C, tdim, rng)
        self.down_attn = AttnBlock(C, embed_dim, rng, attn_dim)
        self.downsample = Conv2d(C, C, 3, rng, stride=2, pad=1)
        self.mid_res = ResBlock(C, C, tdim, rng)
        self.mid_attn = AttnBlock(C, embed_dim, rng, attn_dim)
        self.upsample = ConvTranspose2d(C, C, rng)
        self.up_res = ResBlock(2 * C, C, tdim, rng)
        self.up_attn = AttnBlock(C, embed_dim, rng, attn_dim)
        self.conv_out = Conv2d(C, latent_channels, 3, rng, std=1e-2 / math.sqrt(C * 9))

    @property
    def embed_dim(self) -> int:
        return self.token_embed.dim

    def embed_prompt(self, tokens, metaword: MetaWord | None = None) -> Tensor:
        """Token indices (N, L) -> context (N, L[+1], dim), metaword first when given."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.token_embed.table.shape[0]):
            raise IndexError(f"token index out of range for vocabulary of {self.token_embed.table.shape[0]}")
        emb = self.token_embed(tokens)
        return emb if metaword is None else nn.prepend_metaword(metaword, emb)

    def __call__(self, z_t, t, context: Tensor) -> Tensor:
        z_t = T.as_tensor(z_t)
        n = z_t.shape[0]
        if z_t.ndim != 4 or z_t.shape[1] != self.latent_channels:
            raise ShapeError(f"noise predictor expects (N, {self.latent_channels}, h, w), got {z_t.shape}")
        t = np.broadcast_to(np.asarray(t), (n,))
        temb = T.as_tensor(nn.sinusoidal_embed(t, self.step_dim))
        temb = self.time_mlp2(T.silu(self.time_mlp1(temb)))
        if context.shape[0] != n:
            context = context * np.ones((n, 1, 1)) if context.shape[0] == 1 else context
        h0 = self.conv_in(z_t)
        h1 = self.down_attn(self.down_res(h0, temb), context)
        h2 = self.downsample(h1)
        h2 = self.mid_attn(self.mid_res(h2, temb), context)
        u = self.upsample(h2)
        h = self.up_res(T.concat([u, h1], axis=1), temb)
        h = self.up_attn(h, context)
        return self.conv_out(T.silu(h))


def lora_filter(scope: str = "matrices") -> Callable[[str, nn.LoraTarget], bool]:
    """Which predictor layers receive LoRA: dense and 1x1 convs by default, every layer for ``all``.

    The step-embedding perceptron is left untouched in both cases.
    """
    if scope not in ("matrices", "attention", "all"):
        raise ValueError(f"unknown LoRA scope {scope!r}")

    def include(path: str, layer: nn.LoraTarget) -> bool:
        if path.startswith("time_mlp"):
            return False
        if scope == "attention":
            return ".attn." in path
        if scope == "all":
            return True
        return isinstance(layer, Dense) or (isinstance(layer, Conv2d) and layer.kernel == 1)

    return include


def diffusion_loss(predictor: NoisePredictor, z0: np.ndarray, tokens, sched: DiffusionSchedule,
                   rng: np.random.Generator, metaword: MetaWord | None = None,
                   t: np.ndarray | None = None, eps: np.ndarray | None = None) -> Tensor:
    """Mean squared error between injected and predicted noise at random steps."""
    n = z0.shape[0]
    if t is None:
        t = rng.integers(1, sched.T + 1, size=n)
    if eps is None:
        eps = rng.standard_normal(z0.shape)
    zt = forward_diffuse(z0, t, eps, sched)
    ctx = predictor.embed_prompt(tokens, metaword)
    pred = predictor(zt, t, ctx)
    return T.mean(T.square(pred - eps))


@dataclass
class DiffusionTrainConfig:
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 32


def train_noise_predictor(predictor: NoisePredictor, latents: np.ndarray, tokens: np.ndarray,
                          sched: DiffusionSchedule, cfg: DiffusionTrainConfig, rng: np.random.Generator,
                          trainable: str = "full", lora: nn.LoraSet | None = None,
                          metaword: MetaWord | None = None,
                          log: Callable[[int, float], None] | None = None) -> list[float]:
    """Fit the selected parameter group; the rest of the predictor stays bit-frozen."""
    if len(latents) != len(tokens):
        raise ShapeError(f"{len(latents)} latents but {len(tokens)} prompts")
    if trainable == "full":
        params = predictor.parameters()
    elif trainable == "lora":
        if not lora:
            raise ValueError("trainable='lora' needs a LoRA set")
        params = nn.lora_parameters(lora)
    elif trainable == "metaword":
        if metaword is None:
            raise ValueError("trainable='metaword' needs a metaword")
        params = {"metaword": metaword.embedding}
    else:
        raise ValueError(f"unknown trainable group {trainable!r}")
    opt = nn.Adam(params, cfg.lr)
    tokens = np.asarray(tokens)
    n = len(latents)
    history = []
    frozen_mods = [] if trainable == "full" else [predictor]
    extra = [] if metaword is None or trainable == "metaword" else [metaword]
    if lora and trainable != "lora":
        extra.extend(lora.values())
    with nn.frozen(*frozen_mods, *extra), nn.attached(predictor, lora):
        for p in params.values():
            p.requires_grad = True
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            total = 0.0
            for i in range(0, n, cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                loss = diffusion_loss(predictor, latents[idx], tokens[idx], sched, rng, metaword)
                _check_loss(loss.item(), f"noise predictor ({trainable})")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            history.append(total / n)
            if log:
                log(epoch, history[-1])
    return history


def seed_noise(seeds, shape: tuple[int, ...]) -> np.ndarray:
    """Initial latent noise, one independent stream per seed."""
    return np.stack([np.random.default_rng(int(s)).standard_normal(shape) for s in seeds])


def generate(predictor: NoisePredictor | Callable, tokens, noise: np.ndarray, sched: DiffusionSchedule,
             T_B: int, metaword: MetaWord | None = None, lora: nn.LoraSet | None = None,
             batch: int = 50) -> np.ndarray:
    """Run the deterministic sampler from the given starting noise (N, c, h, w).

    ``predictor`` may also be any callable (z_t, t) -> eps_hat, which
    is how tests inject an oracle.
    """
    steps = sampling_steps(sched.T, T_B)
    noise = np.asarray(noise, dtype=np.float64)
    if not isinstance(predictor, NoisePredictor):
        z = noise.copy()
        for t, t_prev in zip(steps[:-1], steps[1:]):
            z = ddim_step(z, t, t_prev, predictor(z, t), sched)
        return z
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape[0] == 1:
        tokens = np.repeat(tokens, len(noise), axis=0)
    out = []
    with T.no_grad(), nn.attached(predictor, lora):
        for i in range(0, len(noise), batch):
            z = noise[i:i + batch]
            ctx = predictor.embed_prompt(tokens[i:i + batch], metaword)
            for t, t_prev in zip(steps[:-1], steps[1:]):
                eps_hat = predictor(z, np.full(len(z), t), ctx).data
                z = ddim_step(z, t, t_prev, eps_hat, sched)
            out.append(z)
    return np.concatenate(out)
