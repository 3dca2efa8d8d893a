"""End-to-end gradient checks of the pre-training objectives on a two-document micro-batch."""

import logging
import typing as t

import numpy as np

from docline.docgen.generator import GenParams, generate_document, lexicon_tokenizer
from docline.encoders.config import ModelConfig
from docline.encoders.params import init_params
from docline.numkit.gradcheck import GradCheckReport, grad_check
from docline.numkit.tensor import Tensor
from docline.objectives.losses import OBJECTIVES
from docline.objectives.masking import MaskRates
from docline.objectives.pipeline import PreparedDocument, micro_batch_loss_fn, prepare_document

GRADCHECK_OBJECTIVES = (*OBJECTIVES, "total")
GRADCHECK_THRESHOLD = 1e-4
# dense weights large enough to keep textline vectors far from the curvature of l2
# normalization at eps=1e-5, small enough to keep attention soft
GRADCHECK_INIT_STD = 0.5
# decoder output bias that keeps every masked residual of the l1 loss on one side of its kink
DECODER_OFFSET = 2.0
MAX_PLAN_TRIES = 32

MICRO_PAGES = GenParams(lines_range=(3, 5), words_per_line_range=(2, 3), vocab_size=24)


def micro_model_config(**overrides: t.Any) -> ModelConfig:
    fields: dict[str, t.Any] = dict(
        hidden_dim=8,
        text_layers=1,
        fusion_layers=1,
        heads=2,
        ffn_dim=12,
        vocab_size=lexicon_tokenizer(MICRO_PAGES.vocab_size).vocab_size,
        conv_channels=(2, 2, 3, 4),
        decoder_channels=(3, 2),
        roi_hidden=6,
        max_lines=8,
        max_tokens=64,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


def gradcheck_model_config(**overrides: t.Any) -> ModelConfig:
    """The micro model at the weight scale the objective gradient checks run with."""
    return micro_model_config(**{"init_std": GRADCHECK_INIT_STD, **overrides})


def _covers_every_objective(batch: t.Sequence[PreparedDocument]) -> bool:
    return (
        any(item.plan.mlm_positions.size for item in batch)
        and any(item.plan.mrm_pixel_mask.any() for item in batch)
        and any(item.masked.tgm_positions.size for item in batch)
    )


def micro_batch(seed: int, cfg: ModelConfig, count: int = 2) -> list[PreparedDocument]:
    """Micro documents with a mask plan under which every objective has samples."""
    pages = MICRO_PAGES.model_copy(update={"seed": seed})
    docs = [generate_document(pages, index) for index in range(count)]
    rates = MaskRates(mlm=0.3)
    for attempt in range(MAX_PLAN_TRIES):
        batch = [prepare_document(doc, [seed, attempt, slot], cfg, rates, pages.stroke_threshold, pages.fill_level)
                 for slot, doc in enumerate(docs)]
        if _covers_every_objective(batch):
            return batch
    raise RuntimeError(f"no mask plan with samples for every objective after {MAX_PLAN_TRIES} tries (seed {seed})")


def micro_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    params = init_params(cfg, seed)
    params["decoder.up2.b"] = Tensor(np.full(params["decoder.up2.b"].shape, DECODER_OFFSET), requires_grad=True)
    return params


def objective_grad_check(
    objective: str,
    seed: int = 0,
    eps: float = 1e-5,
    max_elements_per_param: t.Optional[int] = 3,
    cfg: t.Optional[ModelConfig] = None,
) -> GradCheckReport:
    if objective not in GRADCHECK_OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}; expected one of {list(GRADCHECK_OBJECTIVES)}")
    cfg = cfg or gradcheck_model_config()
    batch = micro_batch(seed, cfg)
    params = micro_params(cfg, seed)
    logging.info(f"grad_check {objective}: {len(params)} parameters, seed {seed}")
    return grad_check(
        micro_batch_loss_fn(cfg, batch, objective),
        params,
        eps=eps,
        max_elements_per_param=max_elements_per_param,
        rng=np.random.default_rng(seed),
    )
