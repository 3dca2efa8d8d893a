"""Image stream: convolutional backbone, visual tokens, textline RoI head and the pixel decoder."""

import math
import typing as t

import numpy as np

from docline.doclib.bbox import LAYOUT_SCALE
from docline.doclib.ocr import IMAGE_SIZE
from docline.encoders.config import FEATURE_SIZE, VISUAL_GRID, ModelConfig
from docline.errors import DataError
from docline.numkit.functional import adaptive_avg_pool, conv2d, conv_transpose2d, gelu, linear
from docline.numkit.tensor import Tensor, stack

DECODER_STRIDES = (2, 2, 4)


def encode_image(image: t.Union[Tensor, np.ndarray], params: t.Mapping[str, Tensor], cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Backbone 224 -> 14, then 49 visual tokens of width d.

    Returns the `[C, 14, 14]` feature map and the `[49, d]` visual tokens.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.shape != (1, IMAGE_SIZE, IMAGE_SIZE):
        raise DataError(f"encode_image expects shape (1, {IMAGE_SIZE}, {IMAGE_SIZE}), got {x.shape}")
    for j in range(len(cfg.conv_channels)):
        x = gelu(conv2d(x, params[f"vision.conv{j}.w"], params[f"vision.conv{j}.b"], stride=2, padding=1))
    feature_map = x
    pooled = adaptive_avg_pool(feature_map, VISUAL_GRID)
    channels = pooled.shape[0]
    tokens = pooled.reshape(channels, VISUAL_GRID[0] * VISUAL_GRID[1]).T
    return feature_map, linear(tokens, params["vision.proj.w"], params["vision.proj.b"])


def line_cells(bbox: t.Sequence[int], size: int = FEATURE_SIZE) -> tuple[slice, slice]:
    """Feature-map rows and columns covered by a layout box, at least one cell each way."""
    x0, y0, x1, y1 = (int(v) for v in bbox)

    def span(lo: int, hi: int) -> slice:
        start = min(lo * size // LAYOUT_SCALE, size - 1)
        stop = min(max(math.ceil(hi * size / LAYOUT_SCALE), start + 1), size)
        return slice(start, stop)

    return span(y0, y1), span(x0, x1)


def roi_weights(line_bboxes: np.ndarray, line_mask: np.ndarray, size: int = FEATURE_SIZE) -> np.ndarray:
    """`[L, size*size]` averaging weights over the covered cells; padded lines get a zero row."""
    weights = np.zeros((len(line_bboxes), size * size))
    for line, (bbox, real) in enumerate(zip(line_bboxes, line_mask)):
        if not real:
            continue
        rows, cols = line_cells(bbox, size)
        cell = np.zeros((size, size))
        cell[rows, cols] = 1.0
        weights[line] = cell.reshape(-1) / cell.sum()
    return weights


def roi_pool_features(feature_map: Tensor, line_bboxes: np.ndarray, line_mask: np.ndarray, mode: str = "avg") -> Tensor:
    """Region pooling before the head, `[L, C]`; padded lines are zero."""
    channels, height, width = feature_map.shape
    line_mask = np.asarray(line_mask, dtype=bool)
    if mode == "avg":
        flat = feature_map.reshape(channels, height * width).T
        return Tensor(roi_weights(line_bboxes, line_mask, height)) @ flat
    rows_out = []
    for bbox, real in zip(line_bboxes, line_mask):
        if not real:
            rows_out.append(Tensor(np.zeros(channels)))
            continue
        rows, cols = line_cells(bbox, height)
        region = feature_map[:, rows, cols]
        rows_out.append(region.reshape(channels, -1).max(axis=1))
    return stack(rows_out)


def roi_pool_textlines(
    feature_map: Tensor,
    line_bboxes: np.ndarray,
    line_mask: np.ndarray,
    params: t.Mapping[str, Tensor],
    cfg: ModelConfig,
) -> Tensor:
    """rho `[L, d]`: pooled regions through the two-layer head; padded lines are exact zeros."""
    line_mask = np.asarray(line_mask, dtype=bool)
    pooled = roi_pool_features(feature_map, line_bboxes, line_mask, cfg.roi_mode)
    hidden = gelu(linear(pooled, params["roi.fc1.w"], params["roi.fc1.b"]))
    rho = linear(hidden, params["roi.fc2.w"], params["roi.fc2.b"])
    return rho * line_mask.astype(np.float64)[:, None]


def decode_image_regions(feature_map: Tensor, params: t.Mapping[str, Tensor]) -> Tensor:
    """Three transposed convolutions 14 -> 28 -> 56 -> 224; the last one is linear."""
    x = feature_map
    last = len(DECODER_STRIDES) - 1
    for j, stride in enumerate(DECODER_STRIDES):
        x = conv_transpose2d(x, params[f"decoder.up{j}.w"], params[f"decoder.up{j}.b"], stride=stride)
        if j < last:
            x = gelu(x)
    return x
