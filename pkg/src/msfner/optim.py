"""Parameter-update rules: plain SGD and decoupled-weight-decay Adam.

Both steps are pure functions: they never mutate their inputs and return
fresh parameter sets (and, for the adaptive rule, a fresh state), so calling
a step twice from the same state produces identical results. This purity is
what lets the meta-trainer branch a parameter set into a one-step-adapted
copy without disturbing the base parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ParamSet, Tensor


def _check_grads(params: ParamSet, grads: dict[str, np.ndarray]) -> None:
    for name, tensor in params.items():
        if name not in grads:
            raise KeyError(f"missing gradient for parameter '{name}'")
        g = grads[name]
        if g.shape != tensor.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter '{name}' shape {tensor.data.shape}"
            )
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")


def sgd_step(params: ParamSet, grads: dict[str, np.ndarray], lr: float) -> ParamSet:
    """theta' = theta - lr * grad, as a new ParamSet."""
    _check_grads(params, grads)
    return ParamSet(
        {
            name: Tensor(t.data - lr * grads[name], requires_grad=True)
            for name, t in params.items()
        }
    )


def global_norm(grads: dict[str, np.ndarray]) -> float:
    """L2 norm over every entry of every gradient array."""
    return float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale gradients so their global norm is at most max_norm.

    max_norm <= 0 disables clipping. The direction is preserved; below the
    threshold the input dict is returned unchanged.
    """
    if max_norm <= 0:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adaptive_step(
    state: AdamState,
    params: ParamSet,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> tuple[AdamState, ParamSet]:
    """One decoupled-weight-decay Adam update.

    Weight decay is applied directly to the parameters (not folded into the
    gradient), so with a zero gradient the moments stay zero and only the
    decay term moves the parameters. An empty state means this is the first
    step; moments are created as zeros.

    Returns:
        (new state, new params); the input state and params are untouched.
    """
    _check_grads(params, grads)
    t = state.step + 1
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    updated: dict[str, Tensor] = {}
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, tensor in params.items():
        g = grads[name]
        m_prev = state.m.get(name, np.zeros_like(tensor.data))
        v_prev = state.v.get(name, np.zeros_like(tensor.data))
        m = beta1 * m_prev + (1.0 - beta1) * g
        v = beta2 * v_prev + (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        step_arr = lr * m_hat / (np.sqrt(v_hat) + eps)
        new_data = tensor.data - step_arr - lr * weight_decay * tensor.data
        new_m[name] = m
        new_v[name] = v
        updated[name] = Tensor(new_data, requires_grad=True)
    return AdamState(step=t, m=new_m, v=new_v), ParamSet(updated)
