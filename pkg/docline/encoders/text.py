import typing as t
from dataclasses import dataclass

import numpy as np

from docline.doclib.batch import NO_LINE, EncodedDocument
from docline.encoders.config import ModelConfig
from docline.encoders.params import LAYOUT_TABLES, REL_TABLES
from docline.errors import DataError
from docline.numkit.functional import embedding, gelu, layer_norm, linear, scaled_dot_product_attention
from docline.numkit.tensor import Tensor


@dataclass(frozen=True)
class TextInputs:
    token_ids: np.ndarray
    positions: np.ndarray
    bboxes: np.ndarray
    segments: np.ndarray
    membership: np.ndarray

    @classmethod
    def of(cls, encoded: EncodedDocument) -> "TextInputs":
        return cls(
            token_ids=encoded.token_ids,
            positions=encoded.positions,
            bboxes=encoded.bboxes,
            segments=encoded.segments,
            membership=encoded.membership,
        )

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])

    def replace(self, **changes: np.ndarray) -> "TextInputs":
        fields = {name: getattr(self, name) for name in ("token_ids", "positions", "bboxes", "segments", "membership")}
        fields.update(changes)
        return TextInputs(**fields)


def _lookup(params: t.Mapping[str, Tensor], name: str, ids: np.ndarray) -> Tensor:
    try:
        return embedding(params[name], ids)
    except IndexError as e:
        raise DataError(f"{name}: {e}") from e


def embed_layout(params: t.Mapping[str, Tensor], bboxes: np.ndarray) -> Tensor:
    """Sum of the six 2D tables indexed by x0, y0, x1, y1, width and height."""
    bboxes = np.asarray(bboxes, dtype=np.int64)
    x0, y0, x1, y1 = bboxes[:, 0], bboxes[:, 1], bboxes[:, 2], bboxes[:, 3]
    columns = dict(zip(LAYOUT_TABLES, (x0, y0, x1, y1, x1 - x0, y1 - y0)))
    out = _lookup(params, "emb.x0", columns["x0"])
    for table in LAYOUT_TABLES[1:]:
        out = out + _lookup(params, f"emb.{table}", columns[table])
    return out


def embed_text_inputs(inputs: TextInputs, params: t.Mapping[str, Tensor]) -> Tensor:
    """token + 1D position + 2D layout + segment embeddings, `[T, d]`."""
    if inputs.length == 0:
        raise DataError("embed_text_inputs: empty token sequence")
    return (
        _lookup(params, "emb.token", inputs.token_ids)
        + _lookup(params, "emb.position", inputs.positions)
        + embed_layout(params, inputs.bboxes)
        + _lookup(params, "emb.segment", inputs.segments)
    )


def relative_position_bucket(relative: np.ndarray, num_buckets: int = 32, max_distance: int = 128) -> np.ndarray:
    """Bidirectional buckets: half per sign, exact for small offsets, log-spaced up to `max_distance`."""
    relative = np.asarray(relative, dtype=np.int64)
    half = num_buckets // 2
    out = (relative > 0).astype(np.int64) * half
    n = np.abs(relative)
    max_exact = half // 2
    scaled = np.log(np.maximum(n, 1) / max_exact) / np.log(max_distance / max_exact) * (half - max_exact)
    large = np.minimum(max_exact + scaled.astype(np.int64), half - 1)
    return out + np.where(n < max_exact, n, large)


def spatial_bias(
    params: t.Mapping[str, Tensor],
    prefix: str,
    positions: np.ndarray,
    bboxes: np.ndarray,
    cfg: ModelConfig,
) -> Tensor:
    """`[heads, T, T]` additive attention bias from relative 1D position and relative x0 / y0."""
    positions = np.asarray(positions, dtype=np.int64)
    bboxes = np.asarray(bboxes, dtype=np.int64)
    deltas = (
        positions[None, :] - positions[:, None],
        bboxes[None, :, 0] - bboxes[:, None, 0],
        bboxes[None, :, 1] - bboxes[:, None, 1],
    )
    distances = (cfg.rel_max_distance, cfg.rel_2d_max_distance, cfg.rel_2d_max_distance)
    bias: t.Optional[Tensor] = None
    for table, delta, distance in zip(REL_TABLES, deltas, distances):
        buckets = relative_position_bucket(delta, cfg.rel_buckets, distance)
        term = params[f"{prefix}.{table}"][:, buckets]
        bias = term if bias is None else bias + term
    assert bias is not None
    return bias


def transformer_layer(
    x: Tensor, params: t.Mapping[str, Tensor], name: str, cfg: ModelConfig, bias: t.Optional[Tensor]
) -> Tensor:
    """Pre-LN block: x + attn(LN(x)), then + FFN(LN(x))."""
    length = x.shape[0]
    h = layer_norm(x, params[f"{name}.ln1.g"], params[f"{name}.ln1.b"])

    def heads(proj: str) -> Tensor:
        out = linear(h, params[f"{name}.{proj}.w"], params[f"{name}.{proj}.b"])
        return out.reshape(length, cfg.heads, cfg.head_dim).transpose(1, 0, 2)

    attended = scaled_dot_product_attention(heads("q"), heads("k"), heads("v"), bias)
    merged = attended.transpose(1, 0, 2).reshape(length, cfg.hidden_dim)
    x = x + linear(merged, params[f"{name}.o.w"], params[f"{name}.o.b"])
    h = layer_norm(x, params[f"{name}.ln2.g"], params[f"{name}.ln2.b"])
    inner = gelu(linear(h, params[f"{name}.ffn1.w"], params[f"{name}.ffn1.b"]))
    return x + linear(inner, params[f"{name}.ffn2.w"], params[f"{name}.ffn2.b"])


def run_stack(
    x: Tensor,
    params: t.Mapping[str, Tensor],
    prefix: str,
    layers: int,
    cfg: ModelConfig,
    bias: t.Optional[Tensor],
) -> Tensor:
    for i in range(layers):
        x = transformer_layer(x, params, f"{prefix}.l{i}", cfg, bias)
    if layers:
        x = layer_norm(x, params[f"{prefix}.ln_final.g"], params[f"{prefix}.ln_final.b"])
    return x


def encode_text(
    embedded: Tensor,
    inputs: TextInputs,
    params: t.Mapping[str, Tensor],
    cfg: ModelConfig,
    spatial: bool = True,
) -> Tensor:
    """Text encoder with spatial-aware self-attention. `spatial=False` drops the relative biases."""
    bias = spatial_bias(params, "text", inputs.positions, inputs.bboxes, cfg) if spatial else None
    return run_stack(embedded, params, "text", cfg.text_layers, cfg, bias)


def line_pooling_matrix(membership: np.ndarray, lines: int) -> tuple[np.ndarray, np.ndarray]:
    """Row l averages the tokens of line l; rows of empty lines are zero."""
    membership = np.asarray(membership, dtype=np.int64)
    matrix = np.zeros((lines, membership.shape[0]))
    for line in range(lines):
        members = membership == line
        count = int(members.sum())
        if count:
            matrix[line, members] = 1.0 / count
    return matrix, matrix.any(axis=1)


def pool_textline_text(token_features: Tensor, membership: np.ndarray, lines: int) -> tuple[Tensor, np.ndarray]:
    """tau `[L, d]` as per-line token means, and the real-line mask `[L]`."""
    membership = np.asarray(membership, dtype=np.int64)
    if np.any((membership != NO_LINE) & ((membership < 0) | (membership >= lines))):
        raise DataError(f"token membership outside [0, {lines}) and not NO_LINE")
    matrix, mask = line_pooling_matrix(membership, lines)
    return Tensor(matrix) @ token_features, mask
