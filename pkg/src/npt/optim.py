"""LAMB with a Lookahead wrapper, global-norm clipping, and the LR schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= g.dtype.type(scale)
    return total


@dataclass
class LambState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    clamp: float = 10.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    last_trust: dict = field(default_factory=dict)


def lamb_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: LambState, lr: float) -> None:
    """One LAMB update, in place on ``params[name].data``.

    The per-tensor step is the bias-corrected Adam direction scaled by the
    trust ratio ``min(||w||, clamp) / ||update||`` (1 if either norm is 0).
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        w_norm = min(float(np.linalg.norm(p.data.astype(np.float64))), state.clamp)
        u_norm = float(np.linalg.norm(update.astype(np.float64)))
        trust = w_norm / u_norm if w_norm > 0 and u_norm > 0 else 1.0
        state.last_trust[name] = trust
        p.data -= (lr * trust * update).astype(p.dtype, copy=False)


@dataclass
class LookaheadState:
    alpha: float = 0.5
    k: int = 6
    counter: int = 0
    slow: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict[str, Tensor], alpha: float = 0.5, k: int = 6) -> "LookaheadState":
        return cls(alpha, k, 0, {name: p.data.copy() for name, p in params.items()})


def lookahead_sync(state: LookaheadState, params: dict[str, Tensor]) -> bool:
    """Count a fast step; every ``k`` steps pull slow weights toward fast and reset fast.

    Returns True when a sync happened. Fast-optimizer moments are left alone.
    """
    state.counter += 1
    if state.counter < state.k:
        return False
    state.counter = 0
    for name, p in params.items():
        slow = state.slow[name]
        slow += state.alpha * (p.data - slow)
        p.data[...] = slow
    return True


def lr_at(step: int, total: int, base: float, flat_frac: float) -> float:
    """Flat at ``base`` for ``flat_frac`` of training, then cosine-annealed to 0."""
    if total <= 0:
        return base
    start = flat_frac * total
    if step < start:
        return base
    if total - start <= 0:
        return 0.0
    progress = min(1.0, (step - start) / (total - start))
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


class Optimizer:
    """Clip, LAMB step, Lookahead sync: the full per-step recipe."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps=1e-6, weight_decay=0.0,
                 lookahead_alpha=0.5, lookahead_k=6, clip_norm=1.0):
        self.params = params
        self.lamb = LambState(betas[0], betas[1], eps, weight_decay)
        self.lookahead = LookaheadState.init(params, lookahead_alpha, lookahead_k)
        self.clip_norm = clip_norm
        self.last_grad_norm = 0.0

    def step(self, lr: float) -> None:
        grads = {name: p.grad for name, p in self.params.items()}
        self.last_grad_norm = clip_gradients(list(grads.values()), self.clip_norm)
        lamb_step(self.params, grads, self.lamb, lr)
        lookahead_sync(self.lookahead, self.params)
