"""Stage-1 visual pretraining: frame extractor, video encoder and text decoder."""

from __future__ import annotations

import numpy as np

from diffslt import tensor as T
from diffslt.nn import (
    Embedding,
    LayerNorm,
    Linear,
    Module,
    TransformerBlock,
    pad_batch,
    sinusoidal_table,
)
from diffslt.optim import fit
from diffslt.tensor import Tensor


class FrameExtractor(Module):
    """Per-frame two-layer MLP from raw features to model width (no temporal mixing)."""

    def __init__(self, d_raw: int, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(d_raw, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def forward(self, frames) -> Tensor:
        x = T.as_tensor(frames)
        if x.dtype != self.fc1.weight.dtype:
            x = Tensor(x.data.astype(self.fc1.weight.dtype))
        return self.fc2(T.gelu(self.fc1(x)))


class VideoEncoder(Module):
    """Pre-norm transformer encoder over frame features."""

    def __init__(self, dim: int, n_heads: int, n_blocks: int, max_len: int,
                 rng: np.random.Generator, ffn_mult: int = 4):
        self.max_len = max_len
        self.blocks = [TransformerBlock(dim, n_heads, rng, ffn_mult) for _ in range(n_blocks)]
        self.norm = LayerNorm(dim)
        self._pos = sinusoidal_table(max_len, dim)

    def forward(self, fw: Tensor, mask=None) -> Tensor:
        length = fw.shape[-2]
        if length > self.max_len:
            raise ValueError(f"{length} frames exceed the configured maximum of {self.max_len}")
        x = fw + self._pos[:length].astype(fw.dtype)
        for block in self.blocks:
            x = block(x, mask=mask)
        return self.norm(x)


class TextDecoder(Module):
    """Autoregressive transformer decoder that cross-attends to a context sequence."""

    def __init__(self, vocab_size: int, dim: int, n_heads: int, n_blocks: int, max_len: int,
                 rng: np.random.Generator, ffn_mult: int = 4):
        self.max_len = max_len
        self.embed = Embedding(vocab_size, dim, rng)
        self.blocks = [
            TransformerBlock(dim, n_heads, rng, ffn_mult, cross=True, causal=True)
            for _ in range(n_blocks)
        ]
        self.norm = LayerNorm(dim)
        # small output init keeps initial predictions close to uniform
        self.out = Linear(dim, vocab_size, rng, init_std=0.02)
        self._pos = sinusoidal_table(max_len + 2, dim)

    def forward(self, ids: np.ndarray, context: Tensor, context_mask=None) -> Tensor:
        ids = np.asarray(ids)
        x = self.embed(ids) * float(np.sqrt(self.embed.weight.shape[1]))
        x = x + self._pos[: ids.shape[1]].astype(x.dtype)
        for block in self.blocks:
            x = block(x, context=context, context_mask=context_mask)
        return self.out(self.norm(x))

    def loss(self, sentences: list[list[int]], context: Tensor, context_mask, pad_id=0, bos_id=1, eos_id=2):
        inputs, targets = teacher_forcing_batch(sentences, pad_id, bos_id, eos_id)
        logits = self(inputs, context, context_mask)
        return T.cross_entropy(logits, targets, pad_id), logits, targets

    def greedy_decode(self, context: Tensor, context_mask=None, max_len: int | None = None,
                      bos_id: int = 1, eos_id: int = 2) -> list[list[int]]:
        """Greedy decoding; every sequence stops at eos or after ``max_len`` tokens."""
        max_len = self.max_len if max_len is None else max_len
        batch = context.shape[0]
        ids = np.full((batch, 1), bos_id, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        with T.no_grad():
            for _ in range(max_len + 1):
                logits = self(ids, context, context_mask).data[:, -1]
                nxt = logits.argmax(axis=-1)
                nxt = np.where(done, eos_id, nxt)
                ids = np.concatenate([ids, nxt[:, None]], axis=1)
                done |= nxt == eos_id
                if done.all():
                    break
        out = []
        for row in ids[:, 1:]:
            toks = []
            for tok in row[:max_len]:
                if tok == eos_id:
                    break
                toks.append(int(tok))
            out.append(toks)
        return out


def teacher_forcing_batch(sentences, pad_id=0, bos_id=1, eos_id=2):
    """``[bos] + s`` inputs and ``s + [eos]`` targets, right-padded with ``pad_id``."""
    length = max(len(s) for s in sentences) + 1
    inputs = np.full((len(sentences), length), pad_id, dtype=np.int64)
    targets = np.full((len(sentences), length), pad_id, dtype=np.int64)
    for i, s in enumerate(sentences):
        inputs[i, 0] = bos_id
        inputs[i, 1 : len(s) + 1] = s
        targets[i, : len(s)] = s
        targets[i, len(s)] = eos_id
    return inputs, targets


def token_accuracy(logits: Tensor, targets: np.ndarray, pad_id: int = 0) -> float:
    keep = targets != pad_id
    pred = logits.data.argmax(axis=-1)
    return float((pred[keep] == targets[keep]).mean())


class VisualModel(Module):
    """W and V together, plus the stage-1 text decoder TD."""

    def __init__(self, cfg, vocab_size: int, rng: np.random.Generator):
        self.W = FrameExtractor(cfg.d_raw, cfg.model_dim, rng)
        self.V = VideoEncoder(cfg.model_dim, cfg.heads, cfg.visual_blocks, cfg.max_frames, rng, cfg.ffn_mult)
        self.TD = TextDecoder(vocab_size, cfg.model_dim, cfg.heads, cfg.text_decoder_blocks,
                              cfg.max_sentence_len, rng, cfg.ffn_mult)

    def features(self, frames_list: list[np.ndarray]):
        """Return ``(F_w, F_v, mask)`` for a list of variable-length frame matrices."""
        frames, mask = pad_batch([np.asarray(f, dtype=np.float32) for f in frames_list])
        fw = extract_frame_features(self.W, frames)
        fv = encode_video(self.V, fw, mask)
        return fw, fv, mask

    def encoder_state(self) -> dict[str, np.ndarray]:
        state = {f"W.{k}": v for k, v in self.W.state_dict().items()}
        state.update({f"V.{k}": v for k, v in self.V.state_dict().items()})
        return state

    def load_encoder_state(self, state: dict[str, np.ndarray]) -> None:
        self.W.load_state_dict({k[2:]: v for k, v in state.items() if k.startswith("W.")})
        self.V.load_state_dict({k[2:]: v for k, v in state.items() if k.startswith("V.")})


def extract_frame_features(W: FrameExtractor, frames) -> Tensor:
    return W(frames)


def encode_video(V: VideoEncoder, fw: Tensor, mask=None) -> Tensor:
    return V(fw, mask)


def pretrain_visual(split, cfg, rng: np.random.Generator | None = None, log=None,
                    model: VisualModel | None = None, samples=None, steps: int | None = None):
    """Train W, V and TD with teacher-forced cross-entropy.

    Returns ``(model, history)``; ``history`` holds per-step loss rows and
    per-evaluation dev token accuracy under ``"dev_token_accuracy"``.
    """
    rng = rng or np.random.default_rng([cfg.seed, 11])
    vocab = split.sentence_vocab
    model = model or VisualModel(cfg, len(vocab), rng)
    train = samples if samples is not None else split.train
    steps = cfg.visual_steps if steps is None else steps
    bs = min(cfg.pretrain_batch_size, len(train))
    batch_rng = np.random.default_rng([cfg.seed, 12])
    dev_acc = []

    def loss_fn(step):
        idx = batch_rng.choice(len(train), size=bs, replace=False)
        batch = [train[i] for i in idx]
        _, fv, mask = model.features([s.frames for s in batch])
        loss, logits, targets = model.TD.loss([s.sentence for s in batch], fv, mask)
        return loss, {"token_accuracy": token_accuracy(logits, targets)}

    def log_row(row):
        if split.dev and (row["step"] % 500 == 0 or row["step"] == steps - 1):
            row["dev_token_accuracy"] = evaluate_token_accuracy(model, split.dev)
            dev_acc.append((row["step"], row["dev_token_accuracy"]))
        if log is not None:
            log({"event": "pretrain_visual", **row})

    named = [(f"W.{n}", p) for n, p in model.W.named_parameters()]
    named += [(f"V.{n}", p) for n, p in model.V.named_parameters()]
    named += [(f"TD.{n}", p) for n, p in model.TD.named_parameters()]
    history = fit(named, loss_fn, steps, cfg.pretrain_lr, cfg.weight_decay, cfg.grad_clip,
                  log=log_row, log_every=100)
    return model, {"steps": history, "dev_token_accuracy": dev_acc}


def evaluate_token_accuracy(model: VisualModel, samples, batch_size: int = 64) -> float:
    correct = total = 0
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = samples[i : i + batch_size]
            _, fv, mask = model.features([s.frames for s in batch])
            _, logits, targets = model.TD.loss([s.sentence for s in batch], fv, mask)
            keep = targets != 0
            correct += int((logits.data.argmax(-1)[keep] == targets[keep]).sum())
            total += int(keep.sum())
    return correct / max(total, 1)


def embed_pseudo_gloss(gloss_ids, token_embedding: Tensor, lemma_ids: np.ndarray) -> Tensor:
    """Embed pseudo-gloss sequences with a frozen sentence-token embedding table.

    Each gloss id is mapped to the sentence token that names it
    (``lemma_ids[gloss]``), looked up in ``token_embedding`` and given
    sinusoidal positions. Accepts a ``[B, L_p]`` id array (pad rows allowed).
    """
    ids = np.asarray(gloss_ids)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.size and (ids.min() < 0 or ids.max() >= len(lemma_ids)):
        raise IndexError(f"gloss id outside [0, {len(lemma_ids)})")
    dim = token_embedding.shape[1]
    with T.no_grad():
        emb = token_embedding.data[lemma_ids[ids]] * np.sqrt(dim)
        emb = emb + sinusoidal_table(ids.shape[1], dim)
    return Tensor(emb.astype(token_embedding.dtype))
