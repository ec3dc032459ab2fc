"""Distortion metrics and probe-feature alignment scores."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .genmodel import LatentCodec, latent_means
from .nn import Conv2d
from .tensor import ShapeError

PSNR_CAP_DB = 99.0
VISUAL_PROBE_SEED = 20240617


def psnr(x, x_hat, peak: float = 1.0) -> float:
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"psnr: shapes {x.shape} and {x_hat.shape} differ")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(-10.0 * np.log10(mse / peak**2))


def psnr_per_image(x, x_hat, peak: float = 1.0) -> np.ndarray:
    return np.array([psnr(a, b, peak) for a, b in zip(x, x_hat)])


def latent_mse(z, z_hat) -> float:
    z, z_hat = np.asarray(z, dtype=np.float64), np.asarray(z_hat, dtype=np.float64)
    if z.shape != z_hat.shape:
        raise ShapeError(f"latent_mse: shapes {z.shape} and {z_hat.shape} differ")
    return float(np.mean((z - z_hat) ** 2))


# -- probes ---------------------------------------------------------------------------------
class VisualProbe:
    """Frozen random 3-layer conv net on centred pixels, tanh activations, global average pooling.

    The pooled outputs of all three layers are concatenated.
    """

    name = "vis"

    def __init__(self, seed: int = VISUAL_PROBE_SEED, image_channels: int = 3, widths=(16, 32, 32)):
        rng = np.random.default_rng(seed)
        c1, c2, c3 = widths
        self.layers = [Conv2d(image_channels, c1, 3, rng), Conv2d(c1, c2, 4, rng, stride=2, pad=1),
                       Conv2d(c2, c3, 4, rng, stride=2, pad=1)]
        for layer in self.layers:
            layer.bias.data = rng.standard_normal(layer.bias.shape) * 0.5
            layer.set_requires_grad(False)
            layer.weight.data.setflags(write=False)
            layer.bias.data.setflags(write=False)

    def features(self, x) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64) - 0.5
        pooled = []
        with T.no_grad():
            for layer in self.layers:
                h = np.tanh(layer(h).data)
                pooled.append(h.mean(axis=(2, 3)))
        return np.concatenate(pooled, axis=1)


class SemanticProbe:
    """Latent-encoder mean of a trained codec, flattened."""

    name = "sem"

    def __init__(self, codec: LatentCodec):
        self.codec = codec

    def features(self, x) -> np.ndarray:
        return latent_means(self.codec, np.asarray(x, dtype=np.float64)).reshape(len(x), -1)


def cosine_matrix(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("probe produced a zero-norm feature vector")
    return np.clip((fa / na[:, None]) @ (fb / nb[:, None]).T, -1.0, 1.0)


def probe_score(x_a, x_b, probe) -> float:
    """Cosine similarity of the probe features of two single images."""
    fa = probe.features(np.asarray(x_a)[None])
    fb = probe.features(np.asarray(x_b)[None])
    return float(cosine_matrix(fa, fb)[0, 0])


def align_eval(received, cloud_test, probes) -> dict[str, float]:
    """All-pairs probe scores between two image sets.

    Returns mean and std for each probe and for their per-pair sum (``combined``).
    """
    received, cloud_test = np.asarray(received), np.asarray(cloud_test)
    if len(received) == 0 or len(cloud_test) == 0:
        raise ValueError("align_eval needs two non-empty image sets")
    out: dict[str, float] = {}
    total = 0.0
    for probe in probes:
        S = cosine_matrix(probe.features(received), probe.features(cloud_test))
        out[f"{probe.name}_mean"] = float(S.mean())
        out[f"{probe.name}_std"] = float(S.std())
        total = total + S
    out["combined_mean"] = float(np.mean(total))
    out["combined_std"] = float(np.std(total))
    return out


# -- records ----------------------------------------------------------------------------------
@dataclass(frozen=True)
class MetricRecord:
    run_id: str
    stage: str
    epoch: int
    rate_index: int
    snr_db: float
    delay_spread_ns: float
    metric: str
    value: float
    seed: int

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)
