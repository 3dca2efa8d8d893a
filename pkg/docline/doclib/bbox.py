import math
import typing as t

from pydantic import BaseModel, ConfigDict, Field, model_validator

from docline.errors import BBoxError

LAYOUT_SCALE = 1000


class BBox(BaseModel):
    """Box in layout units: integers in [0, 1000], origin top-left."""

    model_config = ConfigDict(frozen=True)

    x0: int = Field(ge=0, le=LAYOUT_SCALE)
    y0: int = Field(ge=0, le=LAYOUT_SCALE)
    x1: int = Field(ge=0, le=LAYOUT_SCALE)
    y1: int = Field(ge=0, le=LAYOUT_SCALE)

    @model_validator(mode="after")
    def _ordered(self) -> "BBox":
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"inverted box {self.as_list()}")
        return self

    @classmethod
    def of(cls, coords: t.Sequence[int]) -> "BBox":
        x0, y0, x1, y1 = (int(c) for c in coords)
        return cls(x0=x0, y0=y0, x1=x1, y1=y1)

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    def contains(self, other: "BBox") -> bool:
        return self.x0 <= other.x0 and self.y0 <= other.y0 and self.x1 >= other.x1 and self.y1 >= other.y1

    def union(self, other: "BBox") -> "BBox":
        return BBox(x0=min(self.x0, other.x0), y0=min(self.y0, other.y0),
                    x1=max(self.x1, other.x1), y1=max(self.y1, other.y1))

    def overlaps(self, other: "BBox") -> bool:
        return self.x0 < other.x1 and other.x0 < self.x1 and self.y0 < other.y1 and other.y0 < self.y1


ZERO_BOX = BBox(x0=0, y0=0, x1=0, y1=0)


class GridConfig(BaseModel):
    rows: int = Field(default=7, ge=1)
    cols: int = Field(default=7, ge=1)

    @model_validator(mode="after")
    def _at_least_two_cells(self) -> "GridConfig":
        if self.size < 2:
            raise ValueError(f"grid needs at least 2 cells, got {self.rows}x{self.cols}")
        return self

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def cell_bbox(self, index: int) -> BBox:
        row, col = divmod(index, self.cols)
        return BBox(
            x0=col * LAYOUT_SCALE // self.cols,
            y0=row * LAYOUT_SCALE // self.rows,
            x1=(col + 1) * LAYOUT_SCALE // self.cols,
            y1=(row + 1) * LAYOUT_SCALE // self.rows,
        )


def _scale(value: float, dim: float) -> int:
    return min(max(math.floor(value * LAYOUT_SCALE / dim), 0), LAYOUT_SCALE)


def normalize_bbox(pixel_box: t.Sequence[float], page_w: float, page_h: float) -> BBox:
    """Map a pixel box to layout units with floor(c * 1000 / dim), clamped to [0, 1000]."""
    if page_w <= 0 or page_h <= 0:
        raise BBoxError(f"page size must be positive, got {page_w}x{page_h}")
    if len(pixel_box) != 4:
        raise BBoxError(f"box needs 4 coordinates, got {list(pixel_box)}")
    x0, y0, x1, y1 = pixel_box
    if x0 > x1 or y0 > y1:
        raise BBoxError(f"inverted box {list(pixel_box)}")
    if x0 < 0 or y0 < 0 or x1 > page_w or y1 > page_h:
        raise BBoxError(f"box out of range: {list(pixel_box)} on a {page_w}x{page_h} page")
    return BBox(x0=_scale(x0, page_w), y0=_scale(y0, page_h), x1=_scale(x1, page_w), y1=_scale(y1, page_h))


def assign_grid(bbox: BBox, grid: GridConfig) -> int:
    cx, cy = bbox.center
    row = min(max(math.floor(cy * grid.rows / LAYOUT_SCALE), 0), grid.rows - 1)
    col = min(max(math.floor(cx * grid.cols / LAYOUT_SCALE), 0), grid.cols - 1)
    return row * grid.cols + col


def denormalize_bbox(bbox: BBox, page_w: int, page_h: int) -> tuple[int, int, int, int]:
    """Pixel box covering a layout box: floor on the near edges, ceil on the far ones."""
    x0 = min(bbox.x0 * page_w // LAYOUT_SCALE, page_w)
    y0 = min(bbox.y0 * page_h // LAYOUT_SCALE, page_h)
    x1 = min(math.ceil(bbox.x1 * page_w / LAYOUT_SCALE), page_w)
    y1 = min(math.ceil(bbox.y1 * page_h / LAYOUT_SCALE), page_h)
    return x0, y0, x1, y1
