"""
Adam with bias correction and an exponential moving average of parameters.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from utils.errors import ShapeMismatch

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999
    ema_warmup: bool = False
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    ema: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Dict[str, np.ndarray], **settings) -> "OptimizerState":
        """Zero moments and EMA shadows initialised to the current parameters."""
        state = cls(**settings)
        for name, value in params.items():
            state.m[name] = np.zeros_like(value, dtype=np.float64)
            state.v[name] = np.zeros_like(value, dtype=np.float64)
            state.ema[name] = np.array(value, dtype=np.float64)
        return state

    def effective_decay(self) -> float:
        if not self.ema_warmup:
            return self.ema_decay
        return min(self.ema_decay, (1.0 + self.step) / (10.0 + self.step))


def adam_step(opt: OptimizerState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
    """
    One bias-corrected Adam update, applied in place.

    Parameters without a gradient entry keep their moments and values.

    Args:
        opt (OptimizerState): Moments and step counter, updated in place
        params (dict): Parameter arrays by name, updated in place
        grads (dict): Gradients by name
    """
    opt.step += 1
    correction1 = 1.0 - opt.beta1 ** opt.step
    correction2 = 1.0 - opt.beta2 ** opt.step
    for name, grad in grads.items():
        if name not in params:
            raise ShapeMismatch(f"Gradient for unknown parameter '{name}'")
        if np.shape(grad) != params[name].shape:
            raise ShapeMismatch(f"Gradient for {name} has shape {np.shape(grad)}, expected {params[name].shape}")
        m = opt.m.setdefault(name, np.zeros(params[name].shape))
        v = opt.v.setdefault(name, np.zeros(params[name].shape))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * grad
        v *= opt.beta2
        v += (1.0 - opt.beta2) * np.square(grad)
        update = opt.lr * (m / correction1) / (np.sqrt(v / correction2) + opt.eps)
        params[name] -= update.astype(params[name].dtype)


def update_ema(opt: OptimizerState, params: Dict[str, np.ndarray]) -> None:
    """shadow <- d * shadow + (1 - d) * theta for every parameter."""
    decay = opt.effective_decay()
    for name, value in params.items():
        shadow = opt.ema.get(name)
        if shadow is None:
            opt.ema[name] = np.array(value, dtype=np.float64)
            continue
        shadow *= decay
        shadow += (1.0 - decay) * value
