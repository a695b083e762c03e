from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from psnr_lab.errors import ShapeError
from psnr_lab.tensor import Tensor


@dataclass
class AdamState:
    """
    Moment estimates for one parameter.

    Attributes:
        m: First moment, same shape as the parameter.
        v: Second moment, entrywise ≥ 0.
        t: Number of steps taken.
        lr: Learning rate.
        weight_decay: Decoupled weight decay factor.
    """

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 0.01
    weight_decay: float = 0.0

    @classmethod
    def fresh(cls, shape: tuple[int, ...], **hyper) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape), **hyper)


def adam_step(param: Tensor, grad: np.ndarray, state: AdamState) -> tuple[Tensor, AdamState]:
    """
    One Adam update with bias correction followed by decoupled weight decay.

    The decay is applied after the moment-based update as
    `param ← param − lr·weight_decay·param` and never enters m or v.

    Args:
        param: Parameter leaf, updated in place.
        grad: Gradient with the parameter's shape.
        state: Moment state, updated in place.

    Returns:
        The parameter and the state.
    """
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError("adam_step", param.shape, grad.shape, state.m.shape)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    values = param.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.weight_decay:
        values = values - state.lr * state.weight_decay * values
    param.values = values
    return param, state


@dataclass
class Adam:
    """Adam over a named parameter set; parameters without a gradient are left alone."""

    params: Mapping[str, Tensor]
    lr: float = 0.01
    weight_decay: float = 0.0
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.states[name] = AdamState.fresh(p.shape, lr=self.lr, weight_decay=self.weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        for name, p in self.params.items():
            if p.grad is not None:
                adam_step(p, p.grad, self.states[name])
