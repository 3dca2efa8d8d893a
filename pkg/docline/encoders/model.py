import typing as t
from dataclasses import dataclass

import numpy as np

from docline.encoders.config import VISUAL_TOKENS, ModelConfig
from docline.encoders.fusion import encode_multimodal
from docline.encoders.image import encode_image, roi_pool_textlines
from docline.encoders.text import TextInputs, embed_text_inputs, encode_text, line_pooling_matrix, pool_textline_text
from docline.errors import DataError
from docline.numkit.tensor import Tensor, stack


@dataclass
class DocumentForward:
    """Intermediate features of one document.

    `fused` is None when the fusion encoder was not run (dual-stream evaluation).
    """

    feature_map: Tensor
    visual_tokens: Tensor
    text_features: Tensor
    rho: Tensor
    tau: Tensor
    line_mask: np.ndarray
    fused: t.Optional[Tensor] = None

    @property
    def fused_text(self) -> Tensor:
        if self.fused is None:
            raise ValueError("fusion encoder was not run for this document")
        return self.fused[VISUAL_TOKENS:]

    @property
    def fused_visual(self) -> Tensor:
        if self.fused is None:
            raise ValueError("fusion encoder was not run for this document")
        return self.fused[:VISUAL_TOKENS]


@dataclass
class BatchFeatures:
    rho: Tensor
    tau: Tensor
    pad_mask: np.ndarray

    @classmethod
    def of(cls, forwards: t.Sequence[DocumentForward]) -> "BatchFeatures":
        return cls(
            rho=stack([f.rho for f in forwards]),
            tau=stack([f.tau for f in forwards]),
            pad_mask=np.stack([f.line_mask for f in forwards]),
        )

    @property
    def size(self) -> int:
        return int(self.pad_mask.shape[0])


def forward_document(
    params: t.Mapping[str, Tensor],
    cfg: ModelConfig,
    image: t.Union[Tensor, np.ndarray],
    inputs: TextInputs,
    line_bboxes: np.ndarray,
    line_mask: np.ndarray,
    fuse: bool = True,
) -> DocumentForward:
    if len(line_bboxes) != cfg.max_lines:
        raise DataError(f"expected {cfg.max_lines} line boxes, got {len(line_bboxes)}")
    _, has_tokens = line_pooling_matrix(inputs.membership, cfg.max_lines)
    mask = np.asarray(line_mask, dtype=bool) & has_tokens
    feature_map, visual_tokens = encode_image(image, params, cfg)
    rho = roi_pool_textlines(feature_map, line_bboxes, mask, params, cfg)
    text_features = encode_text(embed_text_inputs(inputs, params), inputs, params, cfg)
    tau, _ = pool_textline_text(text_features, inputs.membership, cfg.max_lines)
    tau = tau * mask.astype(np.float64)[:, None]
    fused = encode_multimodal(visual_tokens, text_features, inputs, params, cfg) if fuse else None
    return DocumentForward(
        feature_map=feature_map,
        visual_tokens=visual_tokens,
        text_features=text_features,
        rho=rho,
        tau=tau,
        line_mask=mask,
        fused=fused,
    )
