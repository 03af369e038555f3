"""AdamW, global-norm gradient clipping and the warmup + cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step is asked to apply NaN/Inf gradients."""


@dataclass
class AdamWState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamWState,
               lr: float | None = None) -> None:
    """One AdamW update applied in place to ``params``.

    Bias-corrected moments, weight decay decoupled from the adaptive step.  A
    non-finite gradient rejects the whole step and leaves params and state
    untouched.
    """
    lr = state.lr if lr is None else lr
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"param shape {p.shape} != grad shape {g.shape}")
    bad = [i for i, g in enumerate(grads) if not np.isfinite(g).all()]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in parameter slots {bad}; step rejected")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("optimizer moment buffers do not mirror the parameter set")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p *= (1.0 - lr * state.weight_decay)
        denom = np.sqrt(v / bc2) + state.eps
        p -= (lr / bc1) * (m / denom)


class AdamW:
    """Stateful wrapper binding an :class:`AdamWState` to a parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grads(self) -> list[np.ndarray]:
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray] | None = None, lr: float | None = None) -> None:
        if grads is None:
            grads = self.grads()
        adamw_step([p.data for p in self.params], grads, self.state, lr=lr)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale grads in place so their global L2 norm is at most max_norm.

    Returns the (possibly scaled) grads and the norm observed before clipping.
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return list(grads), norm


def cosine_lr(step: int, total_steps: int, max_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear warmup over the first warmup_frac of steps, then cosine decay to 0."""
    if total_steps <= 0:
        return max_lr
    warm = int(round(warmup_frac * total_steps))
    if warm > 0 and step < warm:
        return max_lr * (step + 1) / warm
    span = max(1, total_steps - warm)
    progress = min(1.0, (step - warm) / span)
    return 0.5 * max_lr * (1.0 + math.cos(math.pi * progress))
