"""Overlapping tile decomposition of arbitrary-resolution images.

The image is resized so that a ``rows x cols`` grid of ``base``-sized tiles,
spaced ``s_win`` apart and overlapping by ``m_tot`` pixels, covers it exactly.
A global thumbnail (the whole image resized to one tile) is prepended.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from tilepool.imaging import Image, resize_bilinear


@dataclass(frozen=True)
class TilingConfig:
    base_h: int = 378
    base_w: int = 378
    patch: int = 14
    max_tiles: int = 12
    margin_left: int = 4
    margin_right: int = 4

    def __post_init__(self):
        if self.patch < 1:
            raise ValueError("patch must be positive")
        for name in ("base_h", "base_w"):
            v = getattr(self, name)
            if v < 1 or v % self.patch:
                raise ValueError(f"{name}={v} must be a positive multiple of patch={self.patch}")
        if self.margin_left < 0 or self.margin_right < 0:
            raise ValueError("margins must be non-negative")
        if self.base_h // self.patch <= self.margin_left + self.margin_right:
            raise ValueError("margins leave no positive tile stride")
        if self.max_tiles < 1:
            raise ValueError("max_tiles must be >= 1")


@dataclass(frozen=True)
class OverlapGeometry:
    m_tot: int
    s_win: int


@dataclass(frozen=True)
class TilePlan:
    rows: int
    cols: int
    grid_h: int
    grid_w: int

    @property
    def n_tiles(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class TileSet:
    thumbnail: Image
    tiles: list[Image]
    plan: TilePlan
    origins: list[tuple[int, int]] = field(default_factory=list)

    @property
    def crops(self) -> list[Image]:
        """Thumbnail first, then tiles row-major."""
        return [self.thumbnail, *self.tiles]


def compute_overlap_geometry(cfg: TilingConfig) -> OverlapGeometry:
    margins = cfg.margin_left + cfg.margin_right
    m_tot = cfg.patch * margins
    s_win = (cfg.base_h // cfg.patch - margins) * cfg.patch
    return OverlapGeometry(m_tot=m_tot, s_win=s_win)


def tiling_score(rows: int, cols: int, h_reduced: int, w_reduced: int, s_win: int) -> float:
    """Log scale change on each axis plus the aspect distortion between them.

    Without the distortion term every grid with the same tile count ties once
    both axes shrink, so a square image could end up in a 1x12 strip. Scores
    are rounded so mathematically equal candidates tie exactly.
    """
    log_h = math.log(rows * s_win / h_reduced)
    log_w = math.log(cols * s_win / w_reduced)
    return round(abs(log_h) + abs(log_w) + abs(log_h - log_w), 9)


def select_tiling(h_reduced: int, w_reduced: int, s_win: int, max_tiles: int) -> tuple[int, int]:
    """Pick the (rows, cols) grid with the smallest scale change.

    Every grid with ``rows * cols <= max_tiles`` is scored; ties go to fewer
    tiles, then fewer rows, then fewer columns.
    """
    if h_reduced < 1 or w_reduced < 1:
        raise ValueError(f"reduced size must be positive, got {h_reduced}x{w_reduced}")
    best = None
    best_key = None
    for rows in range(1, max_tiles + 1):
        for cols in range(1, max_tiles // rows + 1):
            key = (tiling_score(rows, cols, h_reduced, w_reduced, s_win), rows * cols, rows, cols)
            if best_key is None or key < best_key:
                best, best_key = (rows, cols), key
    return best


def plan_tiling(height: int, width: int, cfg: TilingConfig) -> TilePlan:
    geo = compute_overlap_geometry(cfg)
    # images no larger than the margin still get a 1x1 plan
    h_red = max(1, height - geo.m_tot)
    w_red = max(1, width - geo.m_tot)
    rows, cols = select_tiling(h_red, w_red, geo.s_win, cfg.max_tiles)
    return TilePlan(
        rows=rows,
        cols=cols,
        grid_h=rows * geo.s_win + geo.m_tot,
        grid_w=cols * geo.s_win + geo.m_tot,
    )


def tile_origins(plan: TilePlan, s_win: int) -> list[tuple[int, int]]:
    return [(r * s_win, c * s_win) for r in range(plan.rows) for c in range(plan.cols)]


def tile_image(img: Image, cfg: TilingConfig = TilingConfig()) -> TileSet:
    geo = compute_overlap_geometry(cfg)
    plan = plan_tiling(img.height, img.width, cfg)
    grid = resize_bilinear(img, plan.grid_h, plan.grid_w)
    origins = tile_origins(plan, geo.s_win)
    tiles = [grid.crop(y, x, cfg.base_h, cfg.base_w) for y, x in origins]
    thumbnail = resize_bilinear(img, cfg.base_h, cfg.base_w)
    return TileSet(thumbnail=thumbnail, tiles=tiles, plan=plan, origins=origins)


def coverage_map(plan: TilePlan, cfg: TilingConfig) -> np.ndarray:
    """Number of tiles covering each pixel of the resized grid image."""
    geo = compute_overlap_geometry(cfg)
    cover = np.zeros((plan.grid_h, plan.grid_w), dtype=np.int32)
    for y, x in tile_origins(plan, geo.s_win):
        cover[y:y + cfg.base_h, x:x + cfg.base_w] += 1
    return cover


BAND_TINT = np.array([255, 255, 0], dtype=np.uint16)
OUTLINE = np.array([255, 0, 0], dtype=np.uint8)


def render_grid_overlay(img: Image, cfg: TilingConfig = TilingConfig()) -> Image:
    """Resized grid image with overlap bands tinted yellow and tiles outlined in red."""
    geo = compute_overlap_geometry(cfg)
    plan = plan_tiling(img.height, img.width, cfg)
    grid = resize_bilinear(img, plan.grid_h, plan.grid_w).pixels
    rgb = np.repeat(grid, 3, axis=2) if grid.shape[2] == 1 else grid.copy()
    band = coverage_map(plan, cfg) >= 2
    rgb[band] = ((rgb[band].astype(np.uint16) + BAND_TINT) // 2).astype(np.uint8)
    for y, x in tile_origins(plan, geo.s_win):
        y1, x1 = y + cfg.base_h - 1, x + cfg.base_w - 1
        rgb[y, x:x1 + 1] = OUTLINE
        rgb[y1, x:x1 + 1] = OUTLINE
        rgb[y:y1 + 1, x] = OUTLINE
        rgb[y:y1 + 1, x1] = OUTLINE
    return Image(rgb)
