"""Guidance fusion: merge two feature streams into one conditioning sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from diffslt import tensor as T
from diffslt.nn import LayerNorm, Linear, Module, Parameter
from diffslt.tensor import Tensor


@dataclass
class FusedGuidance:
    values: Tensor  # [B, L, D_c]
    mask: np.ndarray  # [B, L], True for valid positions
    source: str  # "wv", "pv", "w", "v", "p" or "null"

    @property
    def shape(self):
        return self.values.shape


class FusionLayer(Module):
    def __init__(self, dim: int, rng: np.random.Generator, skip: bool = True):
        self.norm = LayerNorm(dim)
        self.fc = Linear(dim, dim, rng)
        self.skip = skip

    def forward(self, x: Tensor) -> Tensor:
        h = T.gelu(self.fc(self.norm(x)))
        return x + h if self.skip else h


class GuidanceFusion(Module):
    """Stacked per-position feed-forward layers over length-concatenated streams.

    With ``early=True`` the two streams are concatenated first and share one
    stack of ``n_layers`` layers. With ``early=False`` each stream gets its
    own stack and the outputs are concatenated afterwards. Either way a final
    linear maps to the conditioning width. ``null`` is the learned
    one-token sequence used for the unconditional branch.
    """

    def __init__(self, dim: int, out_dim: int, rng: np.random.Generator, n_layers: int = 3,
                 skip: bool = True, early: bool = True, null_mode: str = "learned"):
        self.early = early
        self.layers = [FusionLayer(dim, rng, skip) for _ in range(n_layers)]
        if not early:
            self.layers_b = [FusionLayer(dim, rng, skip) for _ in range(n_layers)]
        self.out = Linear(dim, out_dim, rng)
        self.null_mode = null_mode
        if null_mode == "learned":
            self.null = Parameter(rng.normal(0.0, 1.0, size=(1, out_dim)))
        else:
            self._null_zeros = np.zeros((1, out_dim), dtype=np.float32)

    def _stack(self, x: Tensor, layers) -> Tensor:
        for layer in layers:
            x = layer(x)
        return x

    def forward(self, a: Tensor, b: Tensor | None = None, mask_a=None, mask_b=None, source: str = "wv"):
        if b is not None and a.shape[-1] != b.shape[-1]:
            raise T.ShapeError(f"guidance width mismatch: {a.shape} vs {b.shape}")
        mask_a = np.ones(a.shape[:2], dtype=bool) if mask_a is None else np.asarray(mask_a, dtype=bool)
        if b is None:
            return FusedGuidance(self.out(self._stack(a, self.layers)), mask_a, source)
        mask_b = np.ones(b.shape[:2], dtype=bool) if mask_b is None else np.asarray(mask_b, dtype=bool)
        mask = np.concatenate([mask_a, mask_b], axis=1)
        if self.early:
            h = self._stack(T.concat([a, b], axis=1), self.layers)
        else:
            h = T.concat([self._stack(a, self.layers), self._stack(b, self.layers_b)], axis=1)
        return FusedGuidance(self.out(h), mask, source)

    def null_values(self, dtype=np.float32) -> Tensor:
        if self.null_mode == "learned":
            return self.null
        return Tensor(self._null_zeros.astype(dtype))

    def null_guidance(self, batch: int) -> FusedGuidance:
        null = self.null_values()
        values = T.mul(null, np.ones((batch, 1, 1), dtype=null.dtype))
        return FusedGuidance(values, np.ones((batch, 1), dtype=bool), "null")


def fuse(gf: GuidanceFusion, a: Tensor, b: Tensor, mode: str = "wv", mask_a=None, mask_b=None) -> FusedGuidance:
    """Fuse frame (or pseudo-gloss) features ``a`` with video features ``b``."""
    if mode not in ("wv", "pv"):
        raise ValueError(f"mode must be 'wv' or 'pv', got {mode!r}")
    return gf(a, b, mask_a, mask_b, source=mode)


def null_guidance(gf: GuidanceFusion, batch: int) -> FusedGuidance:
    return gf.null_guidance(batch)


def drop_condition(guidance: FusedGuidance, gf: GuidanceFusion, drop: np.ndarray) -> FusedGuidance:
    """Replace the guidance of rows where ``drop`` is true by the null sequence.

    Dropped rows keep only position 0, which holds the null token.
    """
    drop = np.asarray(drop, dtype=bool)
    if not drop.any():
        return guidance
    values = guidance.values
    batch, length, width = values.shape
    null = gf.null_values(values.dtype)
    null_row = T.concat([null, Tensor(np.zeros((length - 1, width), dtype=values.dtype))], axis=0)
    keep = (~drop).astype(values.dtype)[:, None, None]
    mixed = values * keep + T.mul(null_row, (1.0 - keep))
    mask = guidance.mask.copy()
    mask[drop] = False
    mask[drop, 0] = True
    return FusedGuidance(mixed, mask, guidance.source)
