import typing as t

from pydantic import BaseModel, Field, model_validator

from docline.doclib.batch import MAX_LINES, MAX_TOKENS
from docline.doclib.bbox import LAYOUT_SCALE, GridConfig

VISUAL_GRID = (7, 7)
VISUAL_TOKENS = VISUAL_GRID[0] * VISUAL_GRID[1]
FEATURE_SIZE = 14
SEGMENT_TEXT = 0
SEGMENT_VISUAL = 1


class ModelConfig(BaseModel):
    """Shape of the dual-stream encoders, the fusion encoder and the pre-training heads.

    `fusion_layers=0` is a diagnostic configuration: the fused output is then the
    concatenated inputs with their position embeddings added.
    """

    hidden_dim: int = Field(default=64, ge=2)
    text_layers: int = Field(default=2, ge=1)
    fusion_layers: int = Field(default=2, ge=0)
    heads: int = Field(default=4, ge=1)
    ffn_dim: int = Field(default=128, ge=1)
    vocab_size: int = Field(default=260, ge=5)
    conv_channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    decoder_channels: tuple[int, int] = (32, 16)
    roi_hidden: int = Field(default=64, ge=1)
    roi_mode: t.Literal["avg", "max"] = "avg"
    grid: GridConfig = GridConfig()
    max_lines: int = Field(default=MAX_LINES, ge=1)
    max_tokens: int = Field(default=MAX_TOKENS, ge=2)
    rel_buckets: int = Field(default=32, ge=4)
    rel_max_distance: int = Field(default=128, ge=2)
    rel_2d_max_distance: int = Field(default=256, ge=2)
    init_std: float = Field(default=0.02, gt=0.0)

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "ModelConfig":
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}")
        if self.max_tokens < VISUAL_TOKENS:
            raise ValueError(f"max_tokens must cover the {VISUAL_TOKENS} visual positions")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    @property
    def layout_rows(self) -> int:
        return LAYOUT_SCALE + 1

    def fingerprint(self) -> dict[str, t.Any]:
        return self.model_dump(mode="json")
