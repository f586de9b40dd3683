"""SGD and AdamW updates usable both eagerly and inside a differentiable graph.

Both update functions accept numpy arrays or torch tensors.  With tensors the
returned parameters stay attached to the autograd graph through the gradient
argument, which is how the meta-gradient differentiates through one step.
Optimizer moment state is always stored detached.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .exceptions import InvalidInputError
from .model import as_tensor

OPTIMIZERS = ("sgd", "adamw")


@dataclass(frozen=True)
class OptimizerSpec:
    """Optimizer hyperparameters together with its per-parameter state.

    ``exp_avg`` / ``exp_avg_sq`` are ``None`` until the first AdamW step.
    """

    kind: str = "adamw"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.2
    exp_avg: Optional[np.ndarray] = None
    exp_avg_sq: Optional[np.ndarray] = None
    step: int = 0

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise InvalidInputError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate >= 0:
            raise InvalidInputError("learning_rate must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidInputError("betas must lie in [0, 1)")
        if not self.eps > 0 or self.weight_decay < 0 or self.step < 0:
            raise InvalidInputError("need eps > 0, weight_decay >= 0, step >= 0")
        if (self.exp_avg is None) != (self.exp_avg_sq is None):
            raise InvalidInputError("moment buffers must be both set or both unset")
        if self.exp_avg is not None:
            m = np.asarray(self.exp_avg, dtype=np.float64)
            v = np.asarray(self.exp_avg_sq, dtype=np.float64)
            if m.shape != v.shape:
                raise InvalidInputError("moment buffers must have equal shapes")
            object.__setattr__(self, "exp_avg", m)
            object.__setattr__(self, "exp_avg_sq", v)

    def fresh(self) -> "OptimizerSpec":
        return dataclasses.replace(self, exp_avg=None, exp_avg_sq=None, step=0)

    def to_dict(self, include_state=False) -> dict:
        out = {
            "kind": self.kind,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }
        if include_state:
            out["step"] = self.step
            out["exp_avg"] = None if self.exp_avg is None else self.exp_avg.tolist()
            out["exp_avg_sq"] = None if self.exp_avg_sq is None else self.exp_avg_sq.tolist()
        return out


def _check_shapes(theta, g):
    if tuple(np.shape(theta)) != tuple(np.shape(g)):
        raise InvalidInputError(f"parameter shape {tuple(theta.shape)} != gradient shape {tuple(g.shape)}")


def sgd_update(theta, grad, learning_rate):
    """``theta - learning_rate * grad``."""
    _check_shapes(theta, grad)
    if isinstance(theta, torch.Tensor) or isinstance(grad, torch.Tensor):
        return as_tensor(theta) - learning_rate * as_tensor(grad)
    return np.asarray(theta, dtype=np.float64) - learning_rate * np.asarray(grad, dtype=np.float64)


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # derivative 0 at x == 0 instead of inf; the composed AdamW ratio is smooth there
    positive = x > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, x, torch.ones_like(x))), torch.zeros_like(x))


def adamw_update(theta, grad, spec: OptimizerSpec, learning_rate=None):
    """One decoupled-weight-decay Adam step.

    Returns ``(new_theta, new_spec)``.  ``learning_rate`` overrides
    ``spec.learning_rate`` (used by schedules).  Pre-step moments are
    constants; the current step's moment update is part of the graph.
    """
    _check_shapes(theta, grad)
    tensor_in = isinstance(theta, torch.Tensor) or isinstance(grad, torch.Tensor)
    theta_t, g = as_tensor(theta), as_tensor(grad)
    lr = spec.learning_rate if learning_rate is None else learning_rate
    if spec.exp_avg is None:
        m0 = torch.zeros_like(g.detach())
        v0 = torch.zeros_like(g.detach())
    else:
        if spec.exp_avg.shape != tuple(g.shape):
            raise InvalidInputError("optimizer state shape does not match parameters")
        m0, v0 = as_tensor(spec.exp_avg), as_tensor(spec.exp_avg_sq)
    t = spec.step + 1
    m = spec.beta1 * m0 + (1 - spec.beta1) * g
    v = spec.beta2 * v0 + (1 - spec.beta2) * g * g
    m_hat = m / (1 - spec.beta1**t)
    v_hat = v / (1 - spec.beta2**t)
    new_theta = theta_t - lr * (m_hat / (_safe_sqrt(v_hat) + spec.eps) + spec.weight_decay * theta_t)
    new_spec = dataclasses.replace(
        spec, exp_avg=m.detach().numpy().copy(), exp_avg_sq=v.detach().numpy().copy(), step=t
    )
    return (new_theta if tensor_in else new_theta.numpy()), new_spec


def apply_update(theta, grad, spec: OptimizerSpec, learning_rate=None):
    """Dispatch on ``spec.kind``; returns ``(new_theta, new_spec)``."""
    lr = spec.learning_rate if learning_rate is None else learning_rate
    if spec.kind == "sgd":
        return sgd_update(theta, grad, lr), dataclasses.replace(spec, step=spec.step + 1)
    return adamw_update(theta, grad, spec, lr)
