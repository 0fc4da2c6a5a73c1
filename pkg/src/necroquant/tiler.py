"""Sliding-window schedule and multi-magnification patch extraction.

The window slides by 256 pixels in both directions from the top-left corner
with no tissue prefilter, so every pixel of the slide is covered exactly once.
Each scheduled tile yields three concentric 256x256 patches: 20x (256px
field), 10x (512px field read at factor 2), and 5x (1024px field read at
factor 4).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .slide_store import TILE_SIZE, SlidePyramid

FIELD_SIDES = {1: 256, 2: 512, 4: 1024}


@dataclass(frozen=True)
class TileCoord:
    col: int
    row: int
    x0: int  # level-0 origin
    y0: int
    w: int  # effective (clipped) extent
    h: int

    @property
    def center(self):
        # half-open field convention: fields are [center - s/2, center + s/2)
        return self.x0 + TILE_SIZE // 2, self.y0 + TILE_SIZE // 2


@dataclass
class MultiMagPatch:
    tile: TileCoord
    p20: np.ndarray  # 256x256x3, factor 1
    p10: np.ndarray  # 256x256x3, factor 2 (512px level-0 field)
    p5: np.ndarray   # 256x256x3, factor 4 (1024px level-0 field)


def schedule(width: int, height: int):
    """Row-major tile schedule covering the slide exactly once."""
    if width <= 0 or height <= 0:
        raise ValidationError(f"cannot schedule a {width}x{height} slide")
    tiles = []
    for row in range(math.ceil(height / TILE_SIZE)):
        for col in range(math.ceil(width / TILE_SIZE)):
            x0, y0 = col * TILE_SIZE, row * TILE_SIZE
            tiles.append(TileCoord(
                col=col, row=row, x0=x0, y0=y0,
                w=min(TILE_SIZE, width - x0),
                h=min(TILE_SIZE, height - y0),
            ))
    return tiles


def field_origin(tile: TileCoord, factor: int):
    """Level-0 origin of the concentric source field for a given factor."""
    cx, cy = tile.center
    side = FIELD_SIDES[factor]
    return cx - side // 2, cy - side // 2


def extract(slide: SlidePyramid, tile: TileCoord) -> MultiMagPatch:
    """Read the three co-centered patches; out-of-slide areas are padded."""
    patches = {}
    for factor in (1, 2, 4):
        fx, fy = field_origin(tile, factor)
        # field origins are divisible by the factor by construction
        patches[factor] = slide.read_region(
            factor, fx // factor, fy // factor, TILE_SIZE, TILE_SIZE)
    return MultiMagPatch(tile=tile, p20=patches[1], p10=patches[2], p5=patches[4])
