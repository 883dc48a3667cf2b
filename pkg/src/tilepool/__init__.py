"""Arbitrary-resolution visual-token pipeline.

Overlapping image tiling, an attention-pooling vision-language connector with
analytic gradients, visual-token sequence layout, and a prefill cost model.
"""

from tilepool.imaging import Image, read_ppm, resize_bilinear, write_ppm
from tilepool.tiling import (
    OverlapGeometry,
    TilePlan,
    TileSet,
    TilingConfig,
    compute_overlap_geometry,
    select_tiling,
    tile_image,
)

__version__ = "0.1.0"

__all__ = [
    "Image",
    "OverlapGeometry",
    "TilePlan",
    "TileSet",
    "TilingConfig",
    "compute_overlap_geometry",
    "read_ppm",
    "resize_bilinear",
    "select_tiling",
    "tile_image",
    "write_ppm",
]
