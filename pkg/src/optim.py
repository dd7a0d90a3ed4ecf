from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from src.config import logger
from src.tensor import NonFiniteError, ShapeError, Tensor


@dataclass
class AdamState:
    """First/second moment estimates per named parameter."""

    lr: float = 0.0004
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.step_count < 0:
            raise ValueError(f"step_count must be >= 0, got {self.step_count}")
        if self.lr < 0.0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")


def adam_step(
    params: Mapping[str, Tensor],
    state: AdamState,
    grads: Optional[Mapping[str, Optional[np.ndarray]]] = None,
) -> None:
    """
    Apply one bias-corrected Adam update in place.

    Gradients default to each parameter's `grad`; a missing gradient counts as
    zero. Every gradient is checked before any parameter moves, so a failed
    step leaves the model and the state untouched.

    Raises:
        NonFiniteError: If any gradient holds NaN or Inf
        ShapeError: If a gradient does not match its parameter
    """
    resolved: Dict[str, np.ndarray] = {}
    for name, param in params.items():
        grad = param.grad if grads is None else grads.get(name)
        grad = np.zeros_like(param.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient for {name} has shape {grad.shape}, expected {param.shape}")
        if not np.all(np.isfinite(grad)):
            logger.error(f"Non-finite gradient in {name}; skipping the update")
            raise NonFiniteError(f"Non-finite gradient in parameter {name}")
        resolved[name] = grad

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t

    for name, param in params.items():
        grad = resolved[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - state.beta1) * grad if m is None else state.beta1 * m + (1.0 - state.beta1) * grad
        v = (1.0 - state.beta2) * grad * grad if v is None else state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
