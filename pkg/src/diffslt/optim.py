"""AdamW with global-norm gradient clipping and a cosine learning-rate decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from diffslt.nn import Parameter
from diffslt.tensor import global_grad_norm


class NonFiniteGradient(FloatingPointError):
    """A parameter received a NaN or infinite gradient."""


def cosine_lr(step: int, total: int, base_lr: float, min_ratio: float = 0.0) -> float:
    """Cosine decay from ``base_lr`` at step 0 to ``min_ratio * base_lr`` at ``total``."""
    frac = min(max(step / max(total, 1), 0.0), 1.0)
    return base_lr * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))


@dataclass
class OptimState:
    lr: float = 2e-4
    weight_decay: float = 0.01
    clip: float = 0.4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """Decoupled weight decay Adam over a named parameter list."""

    def __init__(self, named_params, lr=2e-4, weight_decay=0.01, clip=0.4, betas=(0.9, 0.999), eps=1e-8):
        self.params: list[tuple[str, Parameter]] = list(named_params)
        self.state = OptimState(lr=lr, weight_decay=weight_decay, clip=clip,
                                beta1=betas[0], beta2=betas[1], eps=eps)
        for name, p in self.params:
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def clip_gradients(self) -> float:
        """Rescale grads in place so their global norm is at most ``clip``; returns the pre-clip norm."""
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
        norm = global_grad_norm(p for _, p in self.params)
        clip = self.state.clip
        if clip and clip > 0 and norm > clip:
            scale = clip / (norm + 1e-12)
            for _, p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * p.grad.dtype.type(scale)
        return norm

    def step(self, lr: float | None = None) -> float:
        st = self.state
        grad_norm = self.clip_gradients()
        lr = st.lr if lr is None else lr
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        bc1 = 1.0 - b1 ** st.step
        bc2 = 1.0 - b2 ** st.step
        for name, p in self.params:
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + st.eps)
            if st.weight_decay:
                p.data *= p.data.dtype.type(1.0 - lr * st.weight_decay)
            p.data -= (lr * update).astype(p.dtype, copy=False)
        return grad_norm


class TrainingDiverged(FloatingPointError):
    """Loss or gradients became non-finite; carries the last good parameters."""

    def __init__(self, message: str, last_good: dict | None = None, step: int = 0):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


def fit(named_params, loss_fn, steps: int, lr: float, weight_decay: float = 0.01,
        clip: float = 0.4, schedule: str = "cosine", log=None, log_every: int = 100,
        snapshot_every: int = 200) -> list[dict]:
    """Minimise ``loss_fn(step)`` for ``steps`` AdamW updates.

    ``loss_fn`` returns a scalar Tensor (or a ``(loss, extras)`` pair whose
    extras dict is merged into the log row). On a non-finite loss or gradient
    :class:`TrainingDiverged` is raised with the last finite snapshot.
    """
    named_params = [(n, p) for n, p in named_params if p.requires_grad]
    opt = AdamW(named_params, lr=lr, weight_decay=weight_decay, clip=clip)
    params = [p for _, p in named_params]
    last_good = {n: p.data.copy() for n, p in named_params}
    history = []
    for step in range(steps):
        cur_lr = cosine_lr(step, steps, lr) if schedule == "cosine" else lr
        opt.zero_grad()
        out = loss_fn(step)
        loss, extras = out if isinstance(out, tuple) else (out, {})
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step}", last_good, step)
        loss.backward()
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        try:
            norm = opt.step(cur_lr)
        except NonFiniteGradient as err:
            raise TrainingDiverged(str(err), last_good, step) from err
        if snapshot_every and (step + 1) % snapshot_every == 0:
            last_good = {n: p.data.copy() for n, p in named_params}
        row = {"step": step, "loss": value, "grad_norm": norm, "lr": cur_lr, **extras}
        history.append(row)
        if log is not None and (step % log_every == 0 or step == steps - 1):
            log(row)
    return history
