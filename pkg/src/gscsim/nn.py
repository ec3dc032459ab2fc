"""Layers, LoRA adapters, embeddings, attention and the Adam optimizer."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import GradientError, ShapeError, Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad)


class Buffer(Tensor):
    """Persistent, never-trained state (checkpointed with parameters)."""

    __slots__ = ()


class Module:
    _skip = ("lora",)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_") or name in self._skip:
                continue
            if isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    yield f"{name}.{k}", v
            else:
                yield name, value

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, (Parameter, Buffer)):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_tensors(full + ".")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, t in self.named_tensors(prefix):
            if isinstance(t, Parameter):
                yield name, t

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def get_submodule(self, path: str) -> "Module":
        mods = dict(self.named_modules())
        if path not in mods:
            raise KeyError(f"no submodule at {path!r}")
        return mods[path]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"state is missing entries: {missing}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.copy()

    def set_requires_grad(self, flag: bool) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


@contextlib.contextmanager
def frozen(*modules: Module):
    """Temporarily mark every parameter of ``modules`` as not trainable."""
    saved = [(p, p.requires_grad) for m in modules for _, p in m.named_parameters()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.standard_normal(shape) * std


# -- LoRA -----------------------------------------------------------------------
class LoraAdapter(Module):
    """Low-rank additive update B @ A for a weight viewed as a (rows x cols) matrix."""

    def __init__(self, rows: int, cols: int, rank: int, rng: np.random.Generator, a_std: float = 0.02):
        if rank < 1 or rank > min(rows, cols):
            raise ValueError(f"LoRA rank {rank} must lie in [1, min({rows}, {cols})]")
        self.rank = rank
        self.B = Parameter(np.zeros((rows, rank)))
        self.A = Parameter(_normal(rng, (rank, cols), a_std))

    @property
    def matrix_shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    def delta(self) -> Tensor:
        return self.B @ self.A


class LoraTarget(Module):
    """A layer whose weight can carry a LoRA update; ``lora`` is not a parameter."""

    weight: Parameter
    lora: LoraAdapter | None = None

    @property
    def matrix_shape(self) -> tuple[int, int]:
        w = self.weight.shape
        return w[0], int(np.prod(w[1:]))

    def effective_weight(self) -> Tensor:
        if self.lora is None:
            return self.weight
        if self.lora.matrix_shape != self.matrix_shape:
            raise ShapeError(f"LoRA shape {self.lora.matrix_shape} does not match weight matrix {self.matrix_shape}")
        return self.weight + self.lora.delta().reshape(self.weight.shape)


class Dense(LoraTarget):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, std: float | None = None):
        self.weight = Parameter(_normal(rng, (out_dim, in_dim), std if std is not None else 1.0 / math.sqrt(in_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None
        self.lora = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.lora is None:
            return _dense(self.weight, self.bias, x)
        return lora_apply(self, self.lora, x)


def _dense(w: Tensor, b: Tensor | None, x: Tensor) -> Tensor:
    x = T.as_tensor(x)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {w.shape}")
    y = x @ w.transpose() if x.ndim >= 2 else (x.reshape(1, -1) @ w.transpose()).reshape(-1)
    return y if b is None else y + b


def lora_apply(layer: Dense, adapter: LoraAdapter, x: Tensor) -> Tensor:
    """(W + B A) x + bias, leaving W untouched."""
    if adapter.matrix_shape != layer.weight.shape:
        raise ShapeError(f"LoRA {adapter.matrix_shape} does not match dense weight {layer.weight.shape}")
    return _dense(layer.weight + adapter.delta(), layer.bias, x)


class Conv2d(LoraTarget):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, pad: int | None = None,
                 std: float | None = None):
        self.weight = Parameter(_normal(rng, (cout, cin, k, k), std if std is not None else 1.0 / math.sqrt(cin * k * k)))
        self.bias = Parameter(np.zeros(cout))
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        self.lora = None

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.effective_weight(), self.stride, self.pad)
        return y + self.bias.reshape(1, -1, 1, 1)


class ConvTranspose2d(LoraTarget):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, k: int = 4, stride: int = 2, pad: int = 1):
        fan = cin * k * k / (stride * stride)
        self.weight = Parameter(_normal(rng, (cin, cout, k, k), 1.0 / math.sqrt(fan)))
        self.bias = Parameter(np.zeros(cout))
        self.stride = stride
        self.pad = pad
        self.lora = None

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv_transpose2d(x, self.effective_weight(), self.stride, self.pad)
        return y + self.bias.reshape(1, -1, 1, 1)


LoraSet = dict[str, LoraAdapter]


def lora_targets(model: Module, include: Callable[[str, LoraTarget], bool] | None = None) -> list[tuple[str, LoraTarget]]:
    out = []
    for path, mod in model.named_modules():
        if isinstance(mod, LoraTarget) and (include is None or include(path, mod)):
            out.append((path, mod))
    return out


def make_lora_set(model: Module, rank: int, rng: np.random.Generator,
                  include: Callable[[str, LoraTarget], bool] | None = None) -> LoraSet:
    """One zero-product adapter per selected matrix; rank is capped by the matrix size."""
    lset: LoraSet = {}
    for path, layer in lora_targets(model, include):
        rows, cols = layer.matrix_shape
        lset[path] = LoraAdapter(rows, cols, min(rank, rows, cols), rng)
    return lset


def lora_parameters(lset: LoraSet, prefix: str = "") -> dict[str, Parameter]:
    params = {}
    for path, ad in lset.items():
        params[f"{prefix}{path}.B"] = ad.B
        params[f"{prefix}{path}.A"] = ad.A
    return params


def lora_state(lset: LoraSet) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in lora_parameters(lset).items()}


def lora_from_state(state: dict[str, np.ndarray]) -> LoraSet:
    paths = sorted({k.rsplit(".", 1)[0] for k in state})
    lset: LoraSet = {}
    for path in paths:
        b, a = state[f"{path}.B"], state[f"{path}.A"]
        ad = LoraAdapter.__new__(LoraAdapter)
        ad.rank = b.shape[1]
        ad.B = Parameter(b)
        ad.A = Parameter(a)
        lset[path] = ad
    return lset


@contextlib.contextmanager
def attached(model: Module, lset: LoraSet | None):
    """Attach ``lset`` to ``model`` for the duration of the block."""
    if not lset:
        yield model
        return
    mods = dict(model.named_modules())
    previous = []
    for path, ad in lset.items():
        layer = mods.get(path)
        if not isinstance(layer, LoraTarget):
            raise KeyError(f"LoRA path {path!r} is not a wrappable layer")
        if ad.matrix_shape != layer.matrix_shape:
            raise ShapeError(f"LoRA at {path}: {ad.matrix_shape} vs weight matrix {layer.matrix_shape}")
        previous.append((layer, layer.lora))
        layer.lora = ad
    try:
        yield model
    finally:
        for layer, old in previous:
            layer.lora = old


# -- embeddings -------------------------------------------------------------------
class Vocab:
    def __init__(self, words):
        self.words = list(words)
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary words must be unique")
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index


def tokenize(text: str, vocab: Vocab) -> list[int]:
    words = text.split()
    unknown = [w for w in words if w not in vocab.index]
    if unknown:
        raise KeyError(f"unknown words: {unknown}")
    return [vocab.index[w] for w in words]


def detokenize(tokens, vocab: Vocab) -> str:
    return " ".join(vocab.words[int(t)] for t in tokens)


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(_normal(rng, (vocab_size, dim), 1.0))

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def __call__(self, tokens) -> Tensor:
        return T.take_rows(self.table, np.asarray(tokens, dtype=np.int64))


class MetaWord(Module):
    """Synthetic prompt token with its own trainable embedding."""

    def __init__(self, embedding):
        self.embedding = Parameter(np.asarray(embedding, dtype=np.float64).reshape(-1))

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, variance: float = 0.02) -> "MetaWord":
        return cls(rng.standard_normal(dim) * math.sqrt(variance))

    @property
    def dim(self) -> int:
        return self.embedding.shape[0]


def prepend_metaword(mu: MetaWord, embedded: Tensor) -> Tensor:
    """[L x dim] -> [(L+1) x dim] (or batched [N x L x dim]) with the metaword as row 0."""
    embedded = T.as_tensor(embedded)
    if embedded.shape[-1] != mu.dim:
        raise ShapeError(f"metaword dim {mu.dim} does not match prompt embedding {embedded.shape}")
    if embedded.ndim == 2:
        return T.concat([mu.embedding.reshape(1, -1), embedded], axis=0)
    n = embedded.shape[0]
    head = mu.embedding.reshape(1, 1, -1) * np.ones((n, 1, 1))
    return T.concat([head, embedded], axis=1)


def sinusoidal_embed(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos position code; scalar t -> (dim,), array t -> (N, dim)."""
    if dim % 2:
        raise ValueError(f"sinusoidal embedding needs an even dim, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("step index must be non-negative")
    freqs = 10000.0 ** (-np.arange(dim // 2) * 2.0 / dim)
    ang = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# -- attention ---------------------------------------------------------------------
def cross_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes; ``mask`` marks valid keys."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: queries {q.shape}, keys {k.shape}, values {v.shape}")
    d = q.shape[-1]
    scores = (q @ T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * (1.0 / math.sqrt(d))
    if mask is not None:
        bias = np.where(np.asarray(mask, dtype=bool), 0.0, -1e9)
        scores = scores + bias[..., None, :]
    return T.softmax(scores, axis=-1) @ v


class CrossAttention(Module):
    """Single-head cross-attention with learned Q/K/V/output projections."""

    def __init__(self, query_dim: int, context_dim: int, rng: np.random.Generator, attn_dim: int = 32,
                 identity_init: bool = False):
        self.to_q = Dense(query_dim, attn_dim, rng, bias=False)
        self.to_k = Dense(context_dim, attn_dim, rng, bias=False)
        self.to_v = Dense(context_dim, attn_dim, rng, bias=False)
        self.to_out = Dense(attn_dim, query_dim, rng)
        if identity_init:
            for layer in (self.to_q, self.to_k, self.to_v, self.to_out):
                layer.weight.data = np.eye(*layer.weight.shape)

    def __call__(self, x: Tensor, context: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if x.shape[-1] != self.to_q.weight.shape[1] or context.shape[-1] != self.to_k.weight.shape[1]:
            raise ShapeError(f"cross-attention: queries {x.shape} / context {context.shape} do not match projections")
        return self.to_out(cross_attention(self.to_q(x), self.to_k(context), self.to_v(context), mask))


# -- optimizer -----------------------------------------------------------------------
@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor]) -> None:
    """Bias-corrected Adam update of every parameter holding a gradient."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise GradientError(f"non-finite gradient for parameter {name}")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.state, self.params)
