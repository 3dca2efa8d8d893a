import typing as t

import numpy as np

from docline.doclib.bbox import GridConfig
from docline.encoders.config import SEGMENT_VISUAL, VISUAL_GRID, VISUAL_TOKENS, ModelConfig
from docline.encoders.text import TextInputs, embed_layout, run_stack, spatial_bias
from docline.numkit.functional import embedding
from docline.numkit.tensor import Tensor, concat

VISUAL_POSITIONS = np.arange(VISUAL_TOKENS, dtype=np.int64)


def visual_boxes() -> np.ndarray:
    """Layout boxes of the 7x7 visual token cells, row-major."""
    grid = GridConfig(rows=VISUAL_GRID[0], cols=VISUAL_GRID[1])
    return np.asarray([grid.cell_bbox(i).as_list() for i in range(grid.size)], dtype=np.int64)


def embed_visual_tokens(visual_tokens: Tensor, params: t.Mapping[str, Tensor], boxes: t.Optional[np.ndarray] = None) -> Tensor:
    boxes = visual_boxes() if boxes is None else boxes
    segments = np.full(VISUAL_TOKENS, SEGMENT_VISUAL, dtype=np.int64)
    return (
        visual_tokens
        + embedding(params["emb.position"], VISUAL_POSITIONS)
        + embed_layout(params, boxes)
        + embedding(params["emb.segment"], segments)
    )


def encode_multimodal(
    visual_tokens: Tensor,
    text_features: Tensor,
    inputs: TextInputs,
    params: t.Mapping[str, Tensor],
    cfg: ModelConfig,
) -> Tensor:
    """Fusion encoder over `[visual block; text block]`, `[49 + T, d]`.

    Visual tokens get their 1D positions 0..48, the boxes of their grid cells and the
    visual segment before concatenation. Text features arrive already embedded.
    """
    boxes = visual_boxes()
    joint = concat([embed_visual_tokens(visual_tokens, params, boxes), text_features], axis=0)
    positions = np.concatenate([VISUAL_POSITIONS, np.asarray(inputs.positions, dtype=np.int64)])
    bboxes = np.concatenate([boxes, np.asarray(inputs.bboxes, dtype=np.int64)])
    bias = spatial_bias(params, "fusion", positions, bboxes, cfg) if cfg.fusion_layers else None
    return run_stack(joint, params, "fusion", cfg.fusion_layers, cfg, bias)
