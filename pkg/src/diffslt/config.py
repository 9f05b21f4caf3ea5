"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Malformed configuration text or value."""


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "diffslt"  # diffslt | diffslt_p

    # corpus
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    n_signers: int = 5
    d_raw: int = 16
    frame_noise: float = 0.3
    max_sentence_len: int = 16
    pseudo_gloss_wer: float = 0.2
    min_gloss_count: int = 20

    # model sizes
    model_dim: int = 64
    heads: int = 4
    ffn_mult: int = 4
    visual_blocks: int = 4
    text_decoder_blocks: int = 2
    text_encoder_blocks: int = 2
    latent_len: int = 8
    latent_dim: int = 32
    denoiser_blocks: int = 4
    fusion_layers: int = 3
    max_frames: int = 64

    # stage 1
    pretrain_batch_size: int = 32
    pretrain_lr: float = 1e-3
    visual_steps: int = 1500
    ae_steps: int = 3000
    ae_latent_noise: float = 0.1
    normalize_latents: bool = True

    # stage 2
    batch_size: int = 8
    lr: float = 2e-4
    lr_schedule: str = "cosine"
    weight_decay: float = 0.01
    grad_clip: float = 0.4
    diffusion_steps: int = 6000
    T: int = 1000
    schedule: str = "shifted_cosine"
    schedule_scale: float | None = None  # 0.1 (diffslt) / 0.3 (diffslt_p)
    loss: str = "l1"
    self_cond_prob: float = 0.5
    cond_drop_prob: float = 0.1
    guidance_features: str = "both"  # frame | video | both
    fusion_skip: bool = True
    early_fusion: bool = True
    null_mode: str = "learned"  # learned | zeros

    # sampling and evaluation
    sampler: str = "ddim"
    sampling_steps: int | None = None  # 30 (diffslt) / 15 (diffslt_p)
    cfg_scale: float = 1.5
    eta: float = 0.0
    n_candidates: int = 5
    sample_seed: int = 0
    homogenization_max_pairs: int = 2000

    def resolved(self) -> "RunConfig":
        """Fill mode-dependent defaults and validate."""
        cfg = dataclasses.replace(self)
        if cfg.mode not in ("diffslt", "diffslt_p"):
            raise ConfigError(f"mode must be diffslt or diffslt_p, got {cfg.mode!r}")
        if cfg.schedule_scale is None:
            cfg.schedule_scale = 0.1 if cfg.mode == "diffslt" else 0.3
        if cfg.sampling_steps is None:
            cfg.sampling_steps = 30 if cfg.mode == "diffslt" else 15
        cfg.validate()
        return cfg

    def validate(self) -> None:
        checks = [
            (self.sampler in ("ddim", "ddpm"), "sampler must be ddim or ddpm"),
            (self.schedule in ("cosine", "shifted_cosine"), "schedule must be cosine or shifted_cosine"),
            (self.guidance_features in ("frame", "video", "both"), "guidance_features must be frame, video or both"),
            (self.null_mode in ("learned", "zeros"), "null_mode must be learned or zeros"),
            (self.loss in ("l1", "l2"), "loss must be l1 or l2"),
            (0.0 <= self.self_cond_prob <= 1.0, "self_cond_prob must be in [0, 1]"),
            (0.0 <= self.cond_drop_prob <= 1.0, "cond_drop_prob must be in [0, 1]"),
            (0.0 <= self.eta <= 1.0, "eta must be in [0, 1]"),
            (0.0 <= self.pseudo_gloss_wer < 1.0, "pseudo_gloss_wer must be in [0, 1)"),
            (self.model_dim % self.heads == 0, "model_dim must be divisible by heads"),
            (self.n_candidates >= 1, "n_candidates must be >= 1"),
            (self.T >= 1, "T must be >= 1"),
            (1 <= self.fusion_layers, "fusion_layers must be >= 1"),
        ]
        if self.sampling_steps is not None:
            checks.append((1 <= self.sampling_steps <= self.T, "sampling_steps must be in [1, T]"))
        if self.schedule_scale is not None:
            checks.append((self.schedule_scale > 0, "schedule_scale must be positive"))
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    # -- text form ---------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().with_overrides(parse_pairs(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def with_overrides(self, pairs: dict[str, str]) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        updates = {}
        for key, raw in pairs.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            updates[key] = _coerce(key, raw, types[key])
        return dataclasses.replace(self, **updates)

    def digest(self, keys) -> str:
        """Stable hash over a subset of keys (used to tie checkpoints to configs)."""
        text = "\n".join(f"{k}={_format(getattr(self, k))}" for k in sorted(keys))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


DATA_KEYS = ("seed", "n_train", "n_dev", "n_test", "n_signers", "d_raw", "frame_noise", "max_sentence_len")
VISUAL_KEYS = DATA_KEYS + (
    "model_dim", "heads", "ffn_mult", "visual_blocks", "text_decoder_blocks", "max_frames",
    "pretrain_batch_size", "pretrain_lr", "visual_steps",
)
AE_KEYS = DATA_KEYS + (
    "model_dim", "heads", "ffn_mult", "text_encoder_blocks", "text_decoder_blocks",
    "latent_len", "latent_dim", "pretrain_batch_size", "pretrain_lr", "ae_steps",
    "ae_latent_noise", "normalize_latents",
)


def parse_pairs(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, raw: str, typ) -> object:
    typ = str(typ)
    optional = "None" in typ
    if optional and raw in ("auto", "none", ""):
        return None
    try:
        if typ.startswith("bool"):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {typ})") from None
    return raw
