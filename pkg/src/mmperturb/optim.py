"""Optimizers and gradient clipping over name -> ndarray dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def _check_shapes(params, grads, *states):
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for {name!r}")
        if grads[name].shape != p.shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {grads[name].shape}, parameter {p.shape}"
            )
        for s in states:
            if name in s and s[name].shape != p.shape:
                raise ShapeError(f"optimizer state for {name!r} has shape {s[name].shape}")


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    _check_shapes(params, grads, state.m, state.v)
    t = state.t + 1
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(m_out, v_out, t)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients jointly when their global L2 norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    # slack keeps a second clip a no-op despite rounding in the first
    if norm <= max_norm + 1e-12:
        return dict(grads)
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}


@dataclass
class MomentumSGD:
    lr: float = 0.01
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place heavy-ball update of ``params``."""
        for name, p in params.items():
            v = self.momentum * self.velocity.get(name, np.zeros_like(p)) - self.lr * grads[name]
            self.velocity[name] = v
            params[name] = p + v
