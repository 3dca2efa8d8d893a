"""Central finite-difference verification of analytic gradients."""

import logging
import typing as t

import numpy as np
from pydantic import BaseModel

from docline.errors import NumericError
from docline.numkit.tensor import Tensor

ScalarFunction = t.Callable[[t.Mapping[str, Tensor]], Tensor]

EPS_RANGE = (1e-7, 1e-3)


class ParamCheck(BaseModel):
    name: str
    max_rel_err: float
    worst_index: list[int]
    checked: int


class GradCheckReport(BaseModel):
    eps: float
    floor: float
    params: list[ParamCheck]

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def passed(self, threshold: float = 1e-4) -> bool:
        return self.max_rel_err < threshold

    def worst(self) -> t.Optional[ParamCheck]:
        return max(self.params, key=lambda p: p.max_rel_err, default=None)


def _scalar(value: Tensor, where: str) -> float:
    if value.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {value.shape}")
    number = value.item()
    if not np.isfinite(number):
        raise NumericError(f"non-finite function value {number} at {where}")
    return number


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    fn: ScalarFunction,
    params: t.Mapping[str, t.Union[np.ndarray, Tensor]],
    eps: float = 1e-5,
    floor: float = 1e-12,
    max_elements_per_param: t.Optional[int] = None,
    rng: t.Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare backprop gradients of `fn` with central differences, per parameter.

    `fn` must be deterministic. With `max_elements_per_param` set, a sample of
    elements drawn from `rng` is perturbed instead of every element.
    """
    if not EPS_RANGE[0] <= eps <= EPS_RANGE[1]:
        raise ValueError(f"eps {eps} outside [{EPS_RANGE[0]}, {EPS_RANGE[1]}]")
    base = {name: np.array(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
            for name, value in params.items()}
    leaves = {name: Tensor(array, requires_grad=True) for name, array in base.items()}
    out = fn(leaves)
    _scalar(out, "the unperturbed parameters")
    out.backward()

    frozen = {name: Tensor(array) for name, array in base.items()}
    rng = rng or np.random.default_rng(0)
    checks: list[ParamCheck] = []
    for name, array in base.items():
        analytic = leaves[name].grad
        analytic = np.zeros(array.shape) if analytic is None else analytic
        if max_elements_per_param is not None and array.size > max_elements_per_param:
            flat_indices = np.sort(rng.choice(array.size, size=max_elements_per_param, replace=False))
        else:
            flat_indices = np.arange(array.size)

        numeric = np.empty(flat_indices.size)
        for slot, flat in enumerate(flat_indices):
            index = np.unravel_index(int(flat), array.shape)
            values = []
            for sign in (1.0, -1.0):
                moved = array.copy()
                moved[index] += sign * eps
                where = f"{name}{list(map(int, index))} {'+' if sign > 0 else '-'}eps"
                values.append(_scalar(fn({**frozen, name: Tensor(moved, _copy=False)}), where))
            numeric[slot] = (values[0] - values[1]) / (2.0 * eps)

        errors = relative_error(analytic.reshape(-1)[flat_indices], numeric, floor)
        worst = int(np.argmax(errors)) if errors.size else 0
        checks.append(ParamCheck(
            name=name,
            max_rel_err=float(errors[worst]) if errors.size else 0.0,
            worst_index=[int(i) for i in np.unravel_index(int(flat_indices[worst]), array.shape)] if errors.size else [],
            checked=int(flat_indices.size),
        ))
        logging.debug(f"grad_check {name}: max rel_err {checks[-1].max_rel_err:.3e} over {flat_indices.size} elements")
    return GradCheckReport(eps=eps, floor=floor, params=checks)
