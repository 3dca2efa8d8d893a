import math
import typing as t
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, Field

from docline.encoders.model import BatchFeatures
from docline.errors import DataError, NumericError
from docline.numkit.functional import (
    MASK_FILL,
    cross_entropy_mean,
    cross_entropy_sum,
    l1_masked_mean,
    l2_normalize,
    linear,
    log_softmax,
)
from docline.numkit.tensor import Operand, Tensor, as_tensor, concat

OBJECTIVES = ("mlm", "trc", "mrm", "tgm")


class Lambdas(BaseModel):
    """Weights of TRC, MRM and TGM against MLM in the total loss."""

    trc: float = Field(default=0.2, ge=0.0)
    mrm: float = Field(default=1.0, ge=0.0)
    tgm: float = Field(default=1.0, ge=0.0)


class LossReport(BaseModel):
    step: t.Optional[int] = None
    mlm: float = Field(default=0.0, ge=0.0)
    trc: float = Field(default=0.0, ge=0.0)
    mrm: float = Field(default=0.0, ge=0.0)
    tgm: float = Field(default=0.0, ge=0.0)
    total: float = 0.0
    lambdas: Lambdas = Lambdas()
    skipped: list[str] = []


def _checked(name: str, fn: t.Callable[[], Tensor]) -> Tensor:
    try:
        return fn()
    except ValueError as e:
        raise DataError(f"{name}: {e}") from e


def mlm_loss(
    fused_texts: t.Sequence[Tensor],
    positions: t.Sequence[np.ndarray],
    labels: t.Sequence[np.ndarray],
    params: t.Mapping[str, Tensor],
) -> t.Optional[Tensor]:
    """Mean cross-entropy over the masked positions of every document; None when nothing is masked."""
    logits, targets = [], []
    for fused, where, label in zip(fused_texts, positions, labels):
        where = np.asarray(where, dtype=np.int64)
        if where.size:
            logits.append(linear(fused[where], params["mlm.w"], params["mlm.b"]))
            targets.append(np.asarray(label, dtype=np.int64)[where])
    if not logits:
        return None
    return _checked("mlm", lambda: cross_entropy_mean(concat(logits), np.concatenate(targets)))


def _masked_max_average(sims: Tensor, query_mask: np.ndarray, key_mask: np.ndarray, temperature: t.Optional[float]) -> Tensor:
    """sims `[Nq, L, Nk, L]` -> `[Nq, Nk]`: max over real keys, mean over real queries."""
    fill = np.where(key_mask, 0.0, MASK_FILL)[None, None, :, :]
    best = (sims + fill).max(axis=3)
    counts = query_mask.sum(axis=1).astype(np.float64)
    weights = query_mask.astype(np.float64)[:, :, None] / counts[:, None, None]
    scores = (best * weights).sum(axis=1)
    return scores if temperature is None else scores * (1.0 / temperature)


def _require_lines(mask: np.ndarray, what: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise DataError(f"{what}: document {int(empty[0])} has no real textlines")
    return mask


def textline_similarity(
    rho: Operand, tau: Operand, mask_rho: np.ndarray, mask_tau: np.ndarray
) -> Tensor:
    """Average over the real lines of `rho` of their best cosine match among the real lines of `tau`.

    The text-to-image direction is the same call with the roles swapped.
    """
    mask_rho = _require_lines(mask_rho, "textline_similarity")
    mask_tau = _require_lines(mask_tau, "textline_similarity")
    a = l2_normalize(as_tensor(rho))
    b = l2_normalize(as_tensor(tau))
    sims = (a @ b.T).reshape(1, a.shape[0], 1, b.shape[0])
    return _masked_max_average(sims, mask_rho, mask_tau, None).reshape(())


def similarity_matrices(batch: BatchFeatures, temperature: t.Optional[float] = None) -> tuple[Tensor, Tensor]:
    """`[N, N]` scores s(rho_m, tau_n) and s(tau_m, rho_n) from one `[N*L, N*L]` product."""
    mask = _require_lines(batch.pad_mask, "trc")
    count, lines, width = batch.rho.shape
    rho = l2_normalize(batch.rho.reshape(count * lines, width))
    tau = l2_normalize(batch.tau.reshape(count * lines, width))
    sims = (rho @ tau.T).reshape(count, lines, count, lines)
    image_to_text = _masked_max_average(sims, mask, mask, temperature)
    text_to_image = _masked_max_average(sims.transpose(2, 3, 0, 1), mask, mask, temperature)
    return image_to_text, text_to_image


def trc_loss(batch: BatchFeatures, temperature: t.Optional[float] = None) -> Tensor:
    """1/2 sum_m [ -1/N log softmax_n s(rho_m, tau_n)[m] - 1/N log softmax_n s(tau_m, rho_n)[m] ]."""
    image_to_text, text_to_image = similarity_matrices(batch, temperature)
    count = batch.size
    diagonal = (np.arange(count), np.arange(count))
    per_direction = [-(log_softmax(scores, axis=1)[diagonal]).sum() * (1.0 / count) for scores in (image_to_text, text_to_image)]
    return (per_direction[0] + per_direction[1]) * 0.5


def mrm_loss(reconstruction: Tensor, original: Operand, pixel_mask: np.ndarray) -> t.Optional[Tensor]:
    """l1 over the planned pixels; None when the plan masks nothing."""
    if not np.any(pixel_mask):
        return None
    return l1_masked_mean(reconstruction, original, pixel_mask)


@dataclass
class TgmBatch:
    """Grid logits `[T_n, G]` and labels `[T_n]` per document; `T_n` may be 0."""

    logits: list[t.Optional[Tensor]]
    labels: list[np.ndarray]

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def token_count(self) -> int:
        return sum(int(label.size) for label in self.labels)


def tgm_logits(fused_text: Tensor, positions: np.ndarray, params: t.Mapping[str, Tensor]) -> t.Optional[Tensor]:
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return None
    return linear(fused_text[positions], params["tgm.w"], params["tgm.b"])


def tgm_loss(tgm: TgmBatch, count: t.Optional[int] = None) -> t.Optional[Tensor]:
    """(1/N) sum over documents of the summed token cross-entropies; None when no token was selected."""
    count = count or tgm.size
    total: t.Optional[Tensor] = None
    for logits, labels in zip(tgm.logits, tgm.labels):
        if logits is None or labels.size == 0:
            continue
        doc_sum = _checked("tgm", lambda: cross_entropy_sum(logits, labels))
        total = doc_sum if total is None else total + doc_sum
    return None if total is None else total * (1.0 / count)


def _value(component: t.Optional[t.Union[Tensor, float]]) -> float:
    if component is None:
        return 0.0
    return component.item() if isinstance(component, Tensor) else float(component)


def total_loss(
    mlm: t.Optional[t.Union[Tensor, float]] = None,
    trc: t.Optional[t.Union[Tensor, float]] = None,
    mrm: t.Optional[t.Union[Tensor, float]] = None,
    tgm: t.Optional[t.Union[Tensor, float]] = None,
    lambdas: t.Optional[Lambdas] = None,
    skipped: t.Iterable[str] = (),
    step: t.Optional[int] = None,
) -> tuple[t.Optional[Tensor], LossReport]:
    """mlm + l_trc * trc + l_mrm * mrm + l_tgm * tgm over the components that are present.

    Absent components count as 0 in the report. The returned tensor is None when every
    component is absent.
    """
    lambdas = lambdas or Lambdas()
    values = {"mlm": _value(mlm), "trc": _value(trc), "mrm": _value(mrm), "tgm": _value(tgm)}
    total_value = values["mlm"] + lambdas.trc * values["trc"] + lambdas.mrm * values["mrm"] + lambdas.tgm * values["tgm"]
    bad = [name for name, value in values.items() if not math.isfinite(value)]
    if bad or not math.isfinite(total_value):
        report = LossReport.model_construct(step=step, **values, total=total_value, lambdas=lambdas, skipped=list(skipped))
        raise NumericError(f"non-finite loss component(s) {bad or ['total']} at step {step}", report=report)

    weighted: list[tuple[float, t.Optional[t.Union[Tensor, float]]]] = [
        (1.0, mlm), (lambdas.trc, trc), (lambdas.mrm, mrm), (lambdas.tgm, tgm)
    ]
    total: t.Optional[Tensor] = None
    for weight, component in weighted:
        if not isinstance(component, Tensor):
            continue
        term = component if weight == 1.0 else component * weight
        total = term if total is None else total + term
    report = LossReport(step=step, **values, total=total_value, lambdas=lambdas, skipped=list(skipped))
    return total, report
