"""Noise schedules, forward noising, the latent denoiser and its training loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from diffslt import tensor as T
from diffslt.fusion import FusedGuidance, GuidanceFusion, drop_condition
from diffslt.nn import LayerNorm, Linear, Module, Parameter, TransformerBlock, pad_batch, timestep_features
from diffslt.optim import fit
from diffslt.tensor import Tensor

COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    scale: float
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] == 1
    log_snr: np.ndarray  # length T + 1, log_snr[0] == +inf

    def __post_init__(self):
        self.alpha_bar.setflags(write=False)
        self.log_snr.setflags(write=False)


def build_schedule(kind: str = "cosine", T: int = 1000, scale: float = 1.0) -> NoiseSchedule:
    """Cosine schedule, optionally shifted in log-SNR by ``2 * ln(scale)``."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if kind not in ("cosine", "shifted_cosine"):
        raise ValueError(f"unknown schedule kind {kind!r}")
    s = COSINE_OFFSET
    t = np.arange(T + 1) / T
    f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
    alpha_bar = f / f[0]
    alpha_bar[0] = 1.0
    with np.errstate(divide="ignore"):
        log_snr = np.log(alpha_bar) - np.log1p(-alpha_bar)
    log_snr[0] = np.inf
    if kind == "shifted_cosine":
        log_snr = log_snr + 2.0 * np.log(scale)
        alpha_bar = _sigmoid(log_snr)
        alpha_bar[0] = 1.0
    return NoiseSchedule(kind, int(T), float(scale), alpha_bar, log_snr)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def forward_noise(z0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps``; ``t`` is a scalar or one step per batch row."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latent shape {z0.shape}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > sched.T):
        raise ValueError(f"timestep outside [0, {sched.T}]")
    ab = sched.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (z0.ndim - ab.ndim))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


class Denoiser(Module):
    """x-prediction network over ``[B, l, d]`` latents with cross-attention to guidance."""

    def __init__(self, latent_len: int, latent_dim: int, dim: int, cond_dim: int, n_heads: int,
                 n_blocks: int, rng: np.random.Generator, ffn_mult: int = 4, T: int = 1000):
        self.T = T
        self.dim = dim
        self.in_proj = Linear(2 * latent_dim, dim, rng)
        self.time1 = Linear(dim, dim, rng)
        self.time2 = Linear(dim, dim, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(latent_len, dim)))
        self.cond_proj = Linear(cond_dim, dim, rng) if cond_dim != dim else None
        self.blocks = [TransformerBlock(dim, n_heads, rng, ffn_mult, cross=True) for _ in range(n_blocks)]
        self.norm = LayerNorm(dim)
        self.out = Linear(dim, latent_dim, rng)
        self.self_cond_init = Parameter(np.zeros((latent_len, latent_dim)))
        self.n_forward = 0

    def forward(self, z_t, self_cond, guidance: FusedGuidance, t) -> Tensor:
        self.n_forward += 1
        dtype = self.in_proj.weight.dtype
        z_t = T.as_tensor(z_t)
        if z_t.dtype != dtype:
            z_t = Tensor(z_t.data.astype(dtype))
        batch = z_t.shape[0]
        if self_cond is None:
            sc = T.mul(self.self_cond_init, np.ones((batch, 1, 1), dtype=dtype))
        else:
            sc = T.as_tensor(self_cond)
            if sc.dtype != dtype:
                sc = Tensor(sc.data.astype(dtype))
        if sc.shape != z_t.shape:
            raise T.ShapeError(f"self-conditioning shape {sc.shape} does not match latent {z_t.shape}")
        x = self.in_proj(T.concat([z_t, sc], axis=-1))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        feats = timestep_features(t * (1000.0 / self.T), self.dim).astype(dtype)
        temb = self.time2(T.gelu(self.time1(Tensor(feats))))
        x = x + T.reshape(temb, (batch, 1, self.dim)) + self.pos
        ctx = guidance.values
        if ctx.shape[0] != batch:
            raise T.ShapeError(f"guidance batch {ctx.shape[0]} does not match latent batch {batch}")
        if self.cond_proj is not None:
            ctx = self.cond_proj(ctx)
        for block in self.blocks:
            x = block(x, context=ctx, context_mask=guidance.mask)
        return self.out(self.norm(x))


class DiffusionModel(Module):
    """Guidance fusion ``GF`` plus denoiser ``Z``; both are trained in stage 2."""

    def __init__(self, cfg, rng: np.random.Generator):
        self.cfg = cfg
        self.GF = GuidanceFusion(cfg.model_dim, cfg.model_dim, rng, cfg.fusion_layers,
                                 cfg.fusion_skip, cfg.early_fusion, cfg.null_mode)
        self.Z = Denoiser(cfg.latent_len, cfg.latent_dim, cfg.model_dim, cfg.model_dim, cfg.heads,
                          cfg.denoiser_blocks, rng, cfg.ffn_mult, cfg.T)

    def guidance(self, a, b, mask_a=None, mask_b=None, source="wv") -> FusedGuidance:
        return self.GF(a, b, mask_a, mask_b, source=source)

    def predict(self, z_t, self_cond, guidance: FusedGuidance, t) -> Tensor:
        return self.Z(z_t, self_cond, guidance, t)

    def state(self) -> dict[str, np.ndarray]:
        state = {f"Z.{k}": v for k, v in self.Z.state_dict().items()}
        state.update({f"GF.{k}": v for k, v in self.GF.state_dict().items()})
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.Z.load_state_dict({k[2:]: v for k, v in state.items() if k.startswith("Z.")})
        self.GF.load_state_dict({k[3:]: v for k, v in state.items() if k.startswith("GF.")})

    def trainable(self):
        for n, p in self.Z.named_parameters():
            yield f"Z.{n}", p
        for n, p in self.GF.named_parameters():
            yield f"GF.{n}", p


@dataclass
class DiffusionLossConfig:
    self_cond_prob: float = 0.5
    cond_drop_prob: float = 0.1
    lambda_t: np.ndarray | None = None  # per-timestep weights, length T + 1; None means all ones
    loss: str = "l1"

    def __post_init__(self):
        for name in ("self_cond_prob", "cond_drop_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.lambda_t is not None and np.any(np.asarray(self.lambda_t) < 0):
            raise ValueError("lambda_t must be non-negative")


@dataclass
class GuidanceBatch:
    """Stage-2 conditioning inputs for one minibatch (frozen features)."""

    a: Tensor | None
    b: Tensor | None
    mask_a: np.ndarray | None
    mask_b: np.ndarray | None
    source: str

    def fuse(self, model: DiffusionModel) -> FusedGuidance:
        if self.a is None:
            return model.GF(self.b, None, self.mask_b, None, source=self.source)
        return model.GF(self.a, self.b, self.mask_a, self.mask_b, source=self.source)


@dataclass
class StageTwoData:
    """Frozen per-sample guidance streams and normalised target latents."""

    stream_a: list[np.ndarray] | None
    stream_b: list[np.ndarray] | None
    z0: np.ndarray  # [N, l, d], normalised
    source: str = "wv"
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.z0)

    def batch(self, idx) -> tuple[GuidanceBatch, np.ndarray]:
        def stack(stream):
            if stream is None:
                return None, None
            arr, mask = pad_batch([stream[i] for i in idx])
            return Tensor(arr.astype(np.float32)), mask

        a, ma = stack(self.stream_a)
        b, mb = stack(self.stream_b)
        if b is None:
            a, ma, b, mb = None, None, a, ma
        return GuidanceBatch(a, b, ma, mb, self.source), self.z0[idx]


def sample_timesteps(rng: np.random.Generator, batch: int, T_max: int) -> np.ndarray:
    """Training timesteps, uniform over ``1..T_max``."""
    return rng.integers(1, T_max + 1, size=batch)


def train_step(model: DiffusionModel, guidance_batch: GuidanceBatch, z0: np.ndarray,
               sched: NoiseSchedule, loss_cfg: DiffusionLossConfig, rng: np.random.Generator):
    """One stage-2 loss evaluation (no parameter update). Returns ``(loss, info)``."""
    batch = z0.shape[0]
    t = sample_timesteps(rng, batch, sched.T)
    eps = rng.standard_normal(z0.shape)
    z_t = forward_noise(z0, t, eps, sched).astype(np.float32)
    guidance = guidance_batch.fuse(model)
    drop = rng.random(batch) < loss_cfg.cond_drop_prob
    guidance = drop_condition(guidance, model.GF, drop)
    use_sc = rng.random() < loss_cfg.self_cond_prob
    self_cond = None
    if use_sc:
        with T.no_grad():
            self_cond = model.predict(z_t, None, guidance, t).data.copy()
    pred = model.predict(z_t, self_cond, guidance, t)
    target = z0.astype(np.float32)
    if loss_cfg.loss == "l1":
        per = T.tabs(pred - target)
    else:
        diff = pred - target
        per = diff * diff
    if loss_cfg.lambda_t is None:
        loss = T.mean(per)
    else:
        w = np.asarray(loss_cfg.lambda_t, dtype=np.float32)[t][:, None, None]
        loss = T.mean(per * w)
    info = {"self_cond": bool(use_sc), "n_dropped": int(drop.sum()), "t_mean": float(t.mean())}
    return loss, info


def train_diffusion(model: DiffusionModel, data: StageTwoData, cfg, sched: NoiseSchedule | None = None,
                    steps: int | None = None, log=None, seed: int | None = None):
    """Stage-2 training with AdamW, cosine decay and global-norm clipping."""
    sched = sched or build_schedule(cfg.schedule, cfg.T, cfg.schedule_scale)
    steps = cfg.diffusion_steps if steps is None else steps
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 31])
    loss_cfg = DiffusionLossConfig(cfg.self_cond_prob, cfg.cond_drop_prob, loss=cfg.loss)
    bs = min(cfg.batch_size, len(data))

    def loss_fn(step):
        idx = rng.choice(len(data), size=bs, replace=False)
        gb, z0 = data.batch(idx)
        loss, info = train_step(model, gb, z0, sched, loss_cfg, rng)
        return loss, {"weighted_loss": float(loss.data), **info}

    def log_row(row):
        if log is not None:
            log({"event": "train_diffusion", **row})

    return fit(list(model.trainable()), loss_fn, steps, cfg.lr, cfg.weight_decay, cfg.grad_clip,
               schedule=cfg.lr_schedule, log=log_row, log_every=100)
