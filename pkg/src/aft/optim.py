"""Adam with bias correction, the only optimizer used for training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamSlot:
    """First/second moment buffers and update count for one tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, param: np.ndarray) -> "AdamSlot":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))


def adam_update(param: np.ndarray, grad: np.ndarray, slot: AdamSlot, lr: float) -> np.ndarray:
    """One in-place Adam step; returns the updated parameter."""
    if param.shape != grad.shape:
        from .errors import DimensionError

        raise DimensionError(f"adam: param {param.shape} vs grad {grad.shape}")
    slot.t += 1
    slot.m *= BETA1
    slot.m += (1.0 - BETA1) * grad
    slot.v *= BETA2
    slot.v += (1.0 - BETA2) * grad * grad
    m_hat = slot.m / (1.0 - BETA1**slot.t)
    v_hat = slot.v / (1.0 - BETA2**slot.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + EPS)
    return param
