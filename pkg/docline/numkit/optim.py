import typing as t
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, Field

from docline.errors import NumericError
from docline.numkit.tensor import Tensor


class ScheduleConfig(BaseModel):
    """Linear warmup to `peak_lr`, then linear decay to 0 at `total_steps`."""

    peak_lr: float = Field(default=1e-4, gt=0.0)
    total_steps: int = Field(default=1000, gt=0)
    warmup_fraction: float = Field(default=0.10, gt=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-2, ge=0.0)

    @property
    def warmup_steps(self) -> int:
        if self.total_steps == 1:
            return 1
        steps = int(round(self.total_steps * self.warmup_fraction))
        return min(max(steps, 1), self.total_steps - 1)


class AdamConfig(BaseModel):
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: t.Mapping[str, Tensor]) -> "AdamState":
        return cls(
            first_moment={name: np.zeros(p.shape) for name, p in params.items()},
            second_moment={name: np.zeros(p.shape) for name, p in params.items()},
            step=0,
        )


def schedule_lr(step: int, cfg: ScheduleConfig) -> float:
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.total_steps == 1:
        return 0.0
    warmup = cfg.warmup_steps
    if step <= warmup:
        return cfg.peak_lr * step / warmup
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - warmup)


def adam_step(
    params: t.Mapping[str, Tensor],
    grads: t.Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float,
    no_decay: t.Collection[str] = (),
    adam: t.Optional[AdamConfig] = None,
) -> tuple[dict[str, Tensor], AdamState]:
    """Bias-corrected Adam with decoupled weight decay.

    Returns fresh parameter tensors and a fresh state; the inputs are left untouched.
    Parameters named in `no_decay` skip the decay term. A parameter without a gradient
    entry is treated as having a zero gradient.
    """
    adam = adam or AdamConfig()
    step = state.step + 1
    correction1 = 1.0 - adam.beta1**step
    correction2 = 1.0 - adam.beta2**step
    new_params: dict[str, Tensor] = {}
    first: dict[str, np.ndarray] = {}
    second: dict[str, np.ndarray] = {}
    for name, param in params.items():
        grad = grads.get(name)
        grad = np.zeros(param.shape) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise ValueError(f"gradient for {name} has shape {grad.shape}, parameter has {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        m = adam.beta1 * state.first_moment[name] + (1.0 - adam.beta1) * grad
        v = adam.beta2 * state.second_moment[name] + (1.0 - adam.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        decay = 0.0 if name in no_decay else weight_decay
        update = m_hat / (np.sqrt(v_hat) + adam.eps) + decay * param.data
        new_params[name] = Tensor(param.data - lr * update, requires_grad=param.requires_grad)
        first[name] = m
        second[name] = v
    return new_params, AdamState(first_moment=first, second_moment=second, step=step)

