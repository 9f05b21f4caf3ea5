"""Samplers, classifier-free guidance and candidate selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from diffslt import tensor as T
from diffslt.diffusion import NoiseSchedule
from diffslt.metrics import bleu_n

TIE_TOL = 1e-12  # scores this close count as equal

Predictor = Callable[[np.ndarray, int, "np.ndarray | None"], np.ndarray]


@dataclass
class SamplerConfig:
    sampler: str = "ddim"
    steps: int = 30
    cfg_scale: float = 1.5
    eta: float = 0.0
    seed: int = 0
    self_condition: bool = True

    def __post_init__(self):
        if self.sampler not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")


def cfg_combine(cond, uncond, w: float) -> np.ndarray:
    """``w * cond + (1 - w) * uncond``; exact copies of a branch at ``w`` of 1 or 0."""
    cond = np.asarray(cond)
    uncond = np.asarray(uncond)
    if cond.shape != uncond.shape:
        raise ValueError(f"branch shapes differ: {cond.shape} vs {uncond.shape}")
    if w == 1.0:
        return cond.copy()
    if w == 0.0:
        return uncond.copy()
    return w * cond + (1.0 - w) * uncond


def timestep_grid(T_max: int, steps: int) -> np.ndarray:
    """Descending, evenly strided timesteps from ``T_max`` to 0 (``steps + 1`` entries)."""
    grid = np.round(np.linspace(T_max, 0, steps + 1)).astype(int)
    if np.any(np.diff(grid) >= 0):
        raise ValueError(f"cannot stride {T_max} timesteps into {steps} distinct steps")
    return grid


def _normal(rng, shape):
    """Draw from one generator, or row by row from a list of per-row generators."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    return np.stack([g.standard_normal(shape[1:]) for g in rng])


@dataclass
class Trajectory:
    timesteps: list[int] = field(default_factory=list)
    latents: list[np.ndarray] = field(default_factory=list)  # z_t at each visited step, starting with z_T
    predictions: list[np.ndarray] = field(default_factory=list)


def sample(predict: Predictor, shape: tuple, sched: NoiseSchedule, cfg: SamplerConfig, rng,
           trajectory: Trajectory | None = None) -> np.ndarray:
    """Run DDIM or ancestral DDPM from pure noise; returns the final clean-latent estimate.

    ``predict(z_t, t, self_cond)`` returns the (already guidance-combined)
    clean-latent estimate. ``rng`` is a Generator or one Generator per row.
    """
    grid = timestep_grid(sched.T, cfg.steps)
    ab = sched.alpha_bar
    z = _normal(rng, shape)
    prev_x0 = None
    if trajectory is not None:
        trajectory.timesteps.append(int(grid[0]))
        trajectory.latents.append(z.copy())
    x0 = z
    for t, s in zip(grid[:-1], grid[1:]):
        x0 = np.asarray(predict(z, int(t), prev_x0 if cfg.self_condition else None), dtype=np.float64)
        if cfg.self_condition:
            prev_x0 = x0
        a_t, a_s = ab[t], ab[s]
        if cfg.sampler == "ddim":
            z = _ddim_step(z, x0, a_t, a_s, cfg.eta, rng, s)
        else:
            z = _ddpm_step(z, x0, a_t, a_s, rng, s)
        if trajectory is not None:
            trajectory.timesteps.append(int(s))
            trajectory.latents.append(z.copy())
            trajectory.predictions.append(x0.copy())
    return z if grid[-1] == 0 else x0


def _ddim_step(z, x0, a_t, a_s, eta, rng, s):
    eps = (z - np.sqrt(a_t) * x0) / np.sqrt(1.0 - a_t)
    sigma = 0.0
    if eta > 0 and s > 0:
        sigma = eta * np.sqrt((1.0 - a_s) / (1.0 - a_t) * (1.0 - a_t / a_s))
    out = np.sqrt(a_s) * x0 + np.sqrt(max(1.0 - a_s - sigma ** 2, 0.0)) * eps
    if sigma > 0:
        out = out + sigma * _normal(rng, z.shape)
    return out


def _ddpm_step(z, x0, a_t, a_s, rng, s):
    """Ancestral step from the Gaussian posterior q(z_s | z_t, x0); noiseless into s = 0."""
    a_ts = a_t / a_s
    denom = 1.0 - a_t
    mean = (np.sqrt(a_s) * (1.0 - a_ts) / denom) * x0 + (np.sqrt(a_ts) * (1.0 - a_s) / denom) * z
    if s == 0:
        return mean
    var = (1.0 - a_s) * (1.0 - a_ts) / denom
    return mean + np.sqrt(var) * _normal(rng, z.shape)


def ddim_sample(predict: Predictor, shape, sched, cfg: SamplerConfig, rng, trajectory=None):
    if cfg.sampler != "ddim":
        raise ValueError("ddim_sample needs sampler='ddim'")
    return sample(predict, shape, sched, cfg, rng, trajectory)


def ddpm_sample(predict: Predictor, shape, sched, cfg: SamplerConfig, rng, trajectory=None):
    if cfg.sampler != "ddpm":
        raise ValueError("ddpm_sample needs sampler='ddpm'")
    return sample(predict, shape, sched, cfg, rng, trajectory)


def guided_predictor(model, guidance, null_guidance, cfg_scale: float) -> Predictor:
    """Wrap a diffusion model into a CFG-combined clean-latent predictor."""

    def predict(z_t, t, self_cond):
        with T.no_grad():
            cond = uncond = None
            if cfg_scale != 0.0:
                cond = model.predict(z_t, self_cond, guidance, t).data.astype(np.float64)
            if cfg_scale != 1.0:
                uncond = model.predict(z_t, self_cond, null_guidance, t).data.astype(np.float64)
        if cond is None:
            return uncond
        if uncond is None:
            return cond
        return cfg_combine(cond, uncond, cfg_scale)

    return predict


def candidate_rngs(seed_base: int, source_ids: Sequence[int], n: int) -> list[np.random.Generator]:
    """One generator per (source, candidate index), independent of batch composition."""
    return [np.random.default_rng([seed_base, int(s), i]) for s in source_ids for i in range(n)]


# -- selection ------------------------------------------------------------------
@dataclass
class CandidateSet:
    source_id: int
    candidates: list[list]
    latents: np.ndarray | None = None
    mbr_index: int = 0
    oracle_index: int | None = None
    seed_base: int = 0

    def __post_init__(self):
        if len(self.candidates) < 1:
            raise ValueError("a candidate set needs at least one candidate")

    def to_record(self, detok=None) -> dict:
        fmt = detok or (lambda c: " ".join(map(str, c)))
        return {
            "source_id": int(self.source_id),
            "candidates": [fmt(c) for c in self.candidates],
            "mbr_index": int(self.mbr_index),
            "oracle_index": None if self.oracle_index is None else int(self.oracle_index),
            "seed_base": int(self.seed_base),
        }


def mbr_risks(candidates) -> np.ndarray:
    """Expected negative BLEU-4 of each candidate against the whole set (itself included)."""
    n = len(candidates)
    risk = np.zeros(n)
    for i, y in enumerate(candidates):
        risk[i] = sum(-bleu_n(y, other, 4) for other in candidates) / n
    return risk


def mbr_select(candidates) -> int:
    """Index of the minimum-risk candidate; ties (within ``TIE_TOL``) go to the lowest index."""
    if isinstance(candidates, CandidateSet):
        candidates = candidates.candidates
    if not candidates:
        raise ValueError("empty candidate set")
    risk = mbr_risks(candidates)
    return int(np.flatnonzero(risk <= risk.min() + TIE_TOL)[0])


def oracle_select(candidates, reference) -> int:
    """Index of the candidate with the highest BLEU-4 against the reference."""
    if isinstance(candidates, CandidateSet):
        candidates = candidates.candidates
    if not candidates:
        raise ValueError("empty candidate set")
    scores = np.array([bleu_n(c, reference, 4) for c in candidates])
    return int(np.flatnonzero(scores >= scores.max() - TIE_TOL)[0])
