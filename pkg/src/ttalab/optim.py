"""Adam with bias correction, keyed by parameter name."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor

__all__ = ["AdamState", "adam_step"]


@dataclass
class AdamState:
    """Single-owner optimizer state; moments are allocated on first sight."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState, params: dict[str, Tensor], grads: dict[str, Tensor]
) -> dict[str, Tensor]:
    """One Adam update over exactly the given parameters.

    Mutates ``state`` (step counter, moments) and returns the new parameter
    tensors; the caller rebinds them. Gradient keys must cover the parameter
    keys and shapes must agree.
    """
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"gradients missing for parameters: {sorted(missing)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads[name].data
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient for {name!r} contains NaN/Inf")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / c1
        v_hat = v / c2
        new = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        out[name] = Tensor._wrap(np.asarray(new, dtype=p.data.dtype))
    return out
