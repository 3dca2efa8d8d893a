import typing as t
from dataclasses import dataclass

from pydantic import BaseModel, model_validator

from docline.doclib.batch import EncodedDocument, encode_document
from docline.doclib.ocr import Document
from docline.encoders.config import ModelConfig
from docline.encoders.image import decode_image_regions
from docline.encoders.model import BatchFeatures, DocumentForward, forward_document
from docline.numkit.tensor import Tensor
from docline.objectives.losses import (
    OBJECTIVES,
    Lambdas,
    LossReport,
    TgmBatch,
    mlm_loss,
    mrm_loss,
    tgm_logits,
    tgm_loss,
    total_loss,
    trc_loss,
)
from docline.objectives.masking import FILL_LEVEL, STROKE_THRESHOLD, MaskedInputs, MaskPlan, MaskRates, apply_plan, plan_masks


class ObjectiveToggles(BaseModel):
    mlm: bool = True
    trc: bool = True
    mrm: bool = True
    tgm: bool = True

    @model_validator(mode="after")
    def _at_least_one(self) -> "ObjectiveToggles":
        if not self.enabled:
            raise ValueError("at least one objective must be enabled")
        return self

    @property
    def enabled(self) -> list[str]:
        return [name for name in OBJECTIVES if getattr(self, name)]

    @classmethod
    def preset(cls, name: str) -> "ObjectiveToggles":
        """Ablation presets: `mlm`, `mlm+mrm`, `mlm+mrm+trc`, `mlm+mrm+trc+tgm`."""
        parts = name.split("+")
        unknown = set(parts) - set(OBJECTIVES)
        if unknown:
            raise ValueError(f"unknown objective preset {name!r}")
        return cls(**{objective: objective in parts for objective in OBJECTIVES})


@dataclass(frozen=True)
class PreparedDocument:
    doc: Document
    encoded: EncodedDocument
    plan: MaskPlan
    masked: MaskedInputs


def prepare_document(
    doc: Document,
    seed: t.Union[int, t.Sequence[int]],
    cfg: ModelConfig,
    rates: t.Optional[MaskRates] = None,
    stroke_threshold: float = STROKE_THRESHOLD,
    fill_level: float = FILL_LEVEL,
) -> PreparedDocument:
    encoded = encode_document(doc, cfg.max_lines, cfg.max_tokens, cfg.grid)
    plan = plan_masks(doc, seed, rates, encoded=encoded, vocab_size=cfg.vocab_size, stroke_threshold=stroke_threshold)
    return PreparedDocument(doc=doc, encoded=encoded, plan=plan, masked=apply_plan(encoded, doc.image, plan, fill_level))


def forward_prepared(
    params: t.Mapping[str, Tensor], cfg: ModelConfig, item: PreparedDocument, fuse: bool = True
) -> DocumentForward:
    return forward_document(
        params,
        cfg,
        item.masked.image,
        item.masked.inputs,
        item.encoded.line_bboxes,
        item.encoded.line_mask,
        fuse=fuse,
    )


def pretraining_loss(
    params: t.Mapping[str, Tensor],
    cfg: ModelConfig,
    batch: t.Sequence[PreparedDocument],
    toggles: t.Optional[ObjectiveToggles] = None,
    lambdas: t.Optional[Lambdas] = None,
    temperature: t.Optional[float] = None,
    step: t.Optional[int] = None,
) -> tuple[t.Optional[Tensor], LossReport]:
    """Forward every enabled objective over a prepared batch and combine them."""
    toggles = toggles or ObjectiveToggles()
    fuse = toggles.mlm or toggles.tgm
    forwards = [forward_prepared(params, cfg, item, fuse=fuse) for item in batch]
    components: dict[str, t.Optional[Tensor]] = dict.fromkeys(OBJECTIVES)

    if toggles.mlm:
        components["mlm"] = mlm_loss(
            [f.fused_text for f in forwards],
            [item.plan.mlm_positions for item in batch],
            [item.encoded.token_ids for item in batch],
            params,
        )
    if toggles.trc:
        components["trc"] = trc_loss(BatchFeatures.of(forwards), temperature)
    if toggles.mrm:
        mrm_terms = []
        for f, item in zip(forwards, batch):
            if item.plan.mrm_pixel_mask.any():
                term = mrm_loss(decode_image_regions(f.feature_map, params), item.doc.image, item.plan.mrm_pixel_mask)
                mrm_terms.append(term)
        if mrm_terms:
            mrm_total = mrm_terms[0]
            for term in mrm_terms[1:]:
                mrm_total = mrm_total + term
            components["mrm"] = mrm_total * (1.0 / len(mrm_terms))
    if toggles.tgm:
        positions = [item.masked.tgm_positions for item in batch]
        components["tgm"] = tgm_loss(TgmBatch(
            logits=[tgm_logits(f.fused_text, where, params) for f, where in zip(forwards, positions)],
            labels=[item.encoded.grid_labels[where] for item, where in zip(batch, positions)],
        ))

    skipped = [name for name in toggles.enabled if components[name] is None]
    return total_loss(**components, lambdas=lambdas, skipped=skipped, step=step)


def micro_batch_loss_fn(
    cfg: ModelConfig,
    batch: t.Sequence[PreparedDocument],
    objective: str,
    temperature: t.Optional[float] = None,
) -> t.Callable[[t.Mapping[str, Tensor]], Tensor]:
    """Scalar function of the parameters for one objective, or `total`, as grad_check expects."""
    toggles = ObjectiveToggles() if objective == "total" else ObjectiveToggles(**{o: o == objective for o in OBJECTIVES})

    def fn(params: t.Mapping[str, Tensor]) -> Tensor:
        loss, report = pretraining_loss(params, cfg, batch, toggles, temperature=temperature)
        if loss is None:
            raise ValueError(f"objective {objective} has no samples in this batch (skipped: {report.skipped})")
        return loss

    return fn

