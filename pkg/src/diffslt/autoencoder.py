"""Stage-1 text latent autoencoder.

Sentences are embedded by a small transformer encoder (``PsiE``), compressed
to ``l x d`` latents by learned queries (``CN``), expanded back to a fixed
number of text positions (``RN``) and decoded greedily (``PsiD``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from diffslt import tensor as T
from diffslt.nn import (
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    TransformerBlock,
    pad_batch,
    sinusoidal_table,
)
from diffslt.optim import fit
from diffslt.tensor import Tensor
from diffslt.visual import TextDecoder


class TextEncoder(Module):
    def __init__(self, vocab_size: int, dim: int, n_heads: int, n_blocks: int, max_len: int,
                 rng: np.random.Generator, ffn_mult: int = 4):
        self.embed = Embedding(vocab_size, dim, rng)
        self.blocks = [TransformerBlock(dim, n_heads, rng, ffn_mult) for _ in range(n_blocks)]
        self.norm = LayerNorm(dim)
        self._pos = sinusoidal_table(max_len + 2, dim)

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        x = self.embed(ids) * float(np.sqrt(self.embed.weight.shape[1]))
        x = x + self._pos[: ids.shape[1]].astype(x.dtype)
        for block in self.blocks:
            x = block(x, mask=mask)
        return self.norm(x) * mask[..., None].astype(x.dtype)


class Compressor(Module):
    """Learned queries cross-attend over text embeddings, then project to ``d``."""

    def __init__(self, dim: int, latent_len: int, latent_dim: int, n_heads: int,
                 rng: np.random.Generator, ffn_mult: int = 4):
        self.queries = Parameter(rng.normal(0.0, 0.02, size=(latent_len, dim)))
        self.norm_q = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rng)
        self.norm_f = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult * dim, rng)
        self.norm_out = LayerNorm(dim)
        self.down = Linear(dim, latent_dim, rng)
        self.proj = Linear(latent_dim, latent_dim, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(latent_len, latent_dim)))

    def forward(self, ft: Tensor, mask: np.ndarray) -> Tensor:
        batch = ft.shape[0]
        q = T.mul(self.queries, np.ones((batch, 1, 1), dtype=ft.dtype))
        x = q + self.attn(self.norm_q(q), ft, key_mask=mask)
        x = x + self.ffn(self.norm_f(x))
        z = self.down(self.norm_out(x))
        return self.proj(z) + self.pos


class Reconstructor(Module):
    """Position queries cross-attend over the latent sequence to rebuild ``[B, L, D]`` text embeddings."""

    def __init__(self, dim: int, latent_dim: int, max_len: int, n_heads: int,
                 rng: np.random.Generator, ffn_mult: int = 4, n_blocks: int = 2):
        self.max_len = max_len
        self.up = Linear(latent_dim, dim, rng)
        self.queries = Parameter(rng.normal(0.0, 0.02, size=(max_len, dim)))
        self.blocks = [TransformerBlock(dim, n_heads, rng, ffn_mult, cross=True) for _ in range(n_blocks)]
        self.norm = LayerNorm(dim)

    def forward(self, z: Tensor, target_len: int) -> Tensor:
        if target_len > self.max_len:
            raise ValueError(f"target_len {target_len} exceeds maximum {self.max_len}")
        batch = z.shape[0]
        ctx = self.up(z)
        x = T.mul(self.queries[:target_len], np.ones((batch, 1, 1), dtype=ctx.dtype))
        for block in self.blocks:
            x = block(x, context=ctx)
        return self.norm(x)


@dataclass
class NormStats:
    """Per-coordinate mean and std of training latents (shape ``[l, d]``)."""

    mean: np.ndarray
    std: np.ndarray

    def normalize(self, z):
        return (np.asarray(z, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    @classmethod
    def identity(cls, latent_len: int, latent_dim: int) -> "NormStats":
        return cls(np.zeros((latent_len, latent_dim)), np.ones((latent_len, latent_dim)))


class TextAutoencoder(Module):
    def __init__(self, cfg, vocab_size: int, rng: np.random.Generator):
        self.cfg = cfg
        self.recon_len = cfg.max_sentence_len + 1
        self.PsiE = TextEncoder(vocab_size, cfg.model_dim, cfg.heads, cfg.text_encoder_blocks,
                                cfg.max_sentence_len, rng, cfg.ffn_mult)
        self.CN = Compressor(cfg.model_dim, cfg.latent_len, cfg.latent_dim, cfg.heads, rng, cfg.ffn_mult)
        self.RN = Reconstructor(cfg.model_dim, cfg.latent_dim, self.recon_len, cfg.heads, rng, cfg.ffn_mult)
        self.PsiD = TextDecoder(vocab_size, cfg.model_dim, cfg.heads, cfg.text_decoder_blocks,
                                cfg.max_sentence_len, rng, cfg.ffn_mult)
        self.norm_stats = NormStats.identity(cfg.latent_len, cfg.latent_dim)

    # -- the four stages -----------------------------------------------------
    def encode_text(self, sentences: list[list[int]]):
        ids, mask = pad_batch([np.asarray(s, dtype=np.int64) for s in sentences])
        return self.PsiE(ids, mask), mask

    def compress(self, ft: Tensor, mask: np.ndarray) -> Tensor:
        return self.CN(ft, mask)

    def reconstruct(self, z, target_len: int | None = None) -> Tensor:
        z = T.as_tensor(z)
        if z.dtype != self.RN.up.weight.dtype:
            z = Tensor(z.data.astype(self.RN.up.weight.dtype))
        return self.RN(z, self.recon_len if target_len is None else target_len)

    def decode_text(self, emb: Tensor) -> list[list[int]]:
        return self.PsiD.greedy_decode(emb)

    # -- conveniences --------------------------------------------------------
    def latents(self, sentences, batch_size: int = 256) -> np.ndarray:
        """Unnormalised ``z_0`` for a list of sentences, without recording gradients."""
        out = []
        with T.no_grad():
            for i in range(0, len(sentences), batch_size):
                ft, mask = self.encode_text(sentences[i : i + batch_size])
                out.append(self.compress(ft, mask).data.astype(np.float64))
        return np.concatenate(out, axis=0)

    def decode_latents(self, z, batch_size: int = 256) -> list[list[int]]:
        """Greedy sentences from unnormalised latents."""
        z = np.asarray(z)
        out = []
        with T.no_grad():
            for i in range(0, len(z), batch_size):
                out.extend(self.decode_text(self.reconstruct(z[i : i + batch_size])))
        return out

    def normalize(self, z):
        return self.norm_stats.normalize(z) if self.cfg.normalize_latents else np.asarray(z, dtype=np.float64)

    def denormalize(self, z):
        return self.norm_stats.denormalize(z) if self.cfg.normalize_latents else np.asarray(z, dtype=np.float64)

    def loss(self, sentences, rng: np.random.Generator | None = None, latent_noise: float = 0.0):
        ft, mask = self.encode_text(sentences)
        z = self.compress(ft, mask)
        if latent_noise > 0 and rng is not None:
            z = z + (latent_noise * rng.normal(size=z.shape)).astype(z.dtype)
        emb = self.reconstruct(z)
        loss, logits, targets = self.PsiD.loss(sentences, emb, None)
        return loss, logits, targets

    def state(self) -> dict[str, np.ndarray]:
        state = {}
        for part in ("PsiE", "CN", "RN", "PsiD"):
            state.update({f"{part}.{k}": v for k, v in getattr(self, part).state_dict().items()})
        state["norm.mean"] = self.norm_stats.mean.copy()
        state["norm.std"] = self.norm_stats.std.copy()
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for part in ("PsiE", "CN", "RN", "PsiD"):
            prefix = part + "."
            getattr(self, part).load_state_dict(
                {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            )
        self.norm_stats = NormStats(np.asarray(state["norm.mean"], dtype=np.float64),
                                    np.asarray(state["norm.std"], dtype=np.float64))

    def trainable(self):
        for part in ("PsiE", "CN", "RN", "PsiD"):
            for n, p in getattr(self, part).named_parameters():
                yield f"{part}.{n}", p


def compute_norm_stats(z: np.ndarray) -> NormStats:
    std = z.std(axis=0)
    return NormStats(z.mean(axis=0), np.maximum(std, 1e-6))


def reconstruction_accuracy(ae: TextAutoencoder, sentences) -> float:
    """Fraction of sentences decoded back exactly from their own latents."""
    decoded = ae.decode_latents(ae.latents(sentences))
    return float(np.mean([list(a) == list(b) for a, b in zip(decoded, sentences)]))


def pretrain_autoencoder(split, cfg, rng: np.random.Generator | None = None, log=None,
                         steps: int | None = None):
    """Train PsiE, CN, RN and PsiD end to end on train sentences, then fit latent norm stats."""
    rng = rng or np.random.default_rng([cfg.seed, 21])
    ae = TextAutoencoder(cfg, len(split.sentence_vocab), rng)
    sentences = [s.sentence for s in split.train]
    steps = cfg.ae_steps if steps is None else steps
    bs = min(cfg.pretrain_batch_size, len(sentences))
    batch_rng = np.random.default_rng([cfg.seed, 22])
    noise_rng = np.random.default_rng([cfg.seed, 23])

    def loss_fn(step):
        idx = batch_rng.choice(len(sentences), size=bs, replace=False)
        loss, _, _ = ae.loss([sentences[i] for i in idx], noise_rng, cfg.ae_latent_noise)
        return loss

    def log_row(row):
        if log is not None:
            log({"event": "pretrain_ae", **row})

    history = fit(list(ae.trainable()), loss_fn, steps, cfg.pretrain_lr, cfg.weight_decay,
                  cfg.grad_clip, log=log_row, log_every=100)
    ae.norm_stats = compute_norm_stats(ae.latents(sentences))
    return ae, history
