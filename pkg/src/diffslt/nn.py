"""Parameter containers and transformer layers built on :mod:`diffslt.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from diffslt import tensor as T
from diffslt.tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Base class; parameters and submodules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        unknown = sorted(set(state) - set(own))
        missing = sorted(set(own) - set(state))
        if unknown or missing:
            raise KeyError(f"state mismatch: unknown={unknown[:5]} missing={missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init_std: float | None = None):
        if init_std is None:
            self.weight = Parameter(_uniform(rng, (d_in, d_out), np.sqrt(6.0 / (d_in + d_out))))
        else:
            self.weight = Parameter(rng.normal(0.0, init_std, size=(d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, scale: float = 0.02):
        self.weight = Parameter(rng.normal(0.0, scale, size=(n, dim)))

    def forward(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads:
            raise T.ShapeError(f"model width {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def forward(self, x: Tensor, context: Tensor | None = None, key_mask=None, causal=False):
        context = x if context is None else context
        out = T.attention(
            self.q(x), self.k(context), self.v(context),
            n_heads=self.n_heads, key_mask=key_mask, causal=causal,
        )
        return self.o(out)


class TransformerBlock(Module):
    """Pre-norm block: self-attention, optional cross-attention, feed-forward."""

    def __init__(
        self,
        dim: int,
        n_heads: int,
        rng: np.random.Generator,
        ffn_mult: int = 4,
        cross: bool = False,
        causal: bool = False,
    ):
        self.causal = causal
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads, rng)
        if cross:
            self.norm_x = LayerNorm(dim)
            self.cross_attn = MultiHeadAttention(dim, n_heads, rng)
        else:
            self.cross_attn = None
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult * dim, rng)

    def forward(self, x, mask=None, context=None, context_mask=None):
        x = x + self.self_attn(self.norm1(x), key_mask=mask, causal=self.causal)
        if self.cross_attn is not None:
            x = x + self.cross_attn(self.norm_x(x), context, key_mask=context_mask)
        return x + self.ffn(self.norm2(x))


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine position table of shape ``[length, dim]``."""
    pos = np.arange(length)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return table


def timestep_features(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features for (possibly fractional) diffusion timesteps."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freq = np.exp(-np.log(max_period) * np.arange(half) / half)
    return np.concatenate([np.sin(t * freq), np.cos(t * freq)], axis=1)


def pad_batch(seqs: list[np.ndarray], pad_value=0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad variable-length arrays; returns ``(batch, valid_mask)``."""
    max_len = max(len(s) for s in seqs)
    first = np.asarray(seqs[0])
    out = np.full((len(seqs), max_len) + first.shape[1:], pad_value, dtype=first.dtype)
    mask = np.zeros((len(seqs), max_len), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask
