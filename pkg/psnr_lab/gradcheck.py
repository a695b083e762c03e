from typing import Callable, Mapping

import numpy as np

from psnr_lab.errors import ConfigError, ContractError, NumericError
from psnr_lab.tensor import Tensor, backward


def _analytic_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    saved = {name: p.grad for name, p in params.items()}
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    grads = {
        name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
        for name, p in params.items()
    }
    for name, p in params.items():
        p.grad = saved[name]
    return grads


def _central_difference(loss_fn: Callable[[], Tensor], param: Tensor, step: float) -> np.ndarray:
    numeric = np.zeros(param.shape)
    for index in np.ndindex(*param.shape):
        original = param.values[index]
        param.values[index] = original + step
        plus = loss_fn().item()
        param.values[index] = original - step
        minus = loss_fn().item()
        param.values[index] = original
        numeric[index] = (plus - minus) / (2.0 * step)
    if not np.all(np.isfinite(numeric)):
        raise NumericError("finite difference produced non-finite values")
    return numeric


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def check_parameters(
    loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], step: float = 1e-5
) -> dict[str, float]:
    """
    Compare back-propagated gradients with central finite differences.

    `loss_fn` must be deterministic: anything random inside it (dropout,
    posterior noise) has to be frozen so that repeated calls see the same draws.

    Args:
        loss_fn: Builds a fresh 1×1 loss on every call.
        params: Parameter leaves to check, by name.
        step: Finite-difference step.

    Returns:
        Per-parameter max over coordinates of |analytic − numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {step}")
    for name, p in params.items():
        if not p.requires_grad:
            raise ContractError(f"{name} is not a parameter leaf")
    analytic = _analytic_gradients(loss_fn, params)
    return {
        name: _relative_error(analytic[name], _central_difference(loss_fn, p, step))
        for name, p in params.items()
    }


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """
    Max relative error between the analytic gradient of `f` at `x` and central differences.

    Args:
        f: Tensor program mapping `x` to a 1×1 tensor.
        x: Parameter leaf (`requires_grad=True`); its values are perturbed in place
            and restored.
        step: Finite-difference step.

    Returns:
        max |analytic − numeric| / max(1, |analytic|).
    """
    return check_parameters(lambda: f(x), {"x": x}, step)["x"]
