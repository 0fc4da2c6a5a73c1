"""On-disk slide store: tiled pyramids, label masks, and the dataset manifest.

A dataset is a directory:

    manifest.json
    slides/<slide_id>/levels/<factor>/tile_<col>_<row>.png
    slides/<slide_id>/mask.png          (optional ground truth)

Tiles are 256x256 8-bit RGB PNGs (edge tiles clipped); masks are 8-bit
single-channel PNGs whose pixel values are TissueClass codes.
"""

import json
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ManifestError, ValidationError
from .tissue import CANONICAL_COLORS, NUM_CLASSES, PAD_CLASS, PAD_RGB, TissueClass

TILE_SIZE = 256
DEFAULT_FACTORS = (1, 2, 4)

# manifest schema: exactly these keys, per object
_SLIDE_KEYS = {"id", "width", "height", "levels"}
_CASE_KEYS = {
    "id", "slides", "r_pr", "os_months", "os_event",
    "pfs_months", "pfs_event", "metastasis_at_diagnosis",
}
_CASE_OPTIONAL_KEYS = {"split"}


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Area-average (box filter) downsample by an integer factor.

    Partial edge blocks average over the pixels actually present, so class
    area proportions are preserved as closely as integer rounding allows.
    """
    if factor == 1:
        return img
    h, w = img.shape[:2]
    chans = img.shape[2:]
    oh, ow = math.ceil(h / factor), math.ceil(w / factor)
    out = np.empty((oh, ow) + chans, dtype=np.uint8)
    col_x = np.arange(ow) * factor
    col_w = np.minimum(col_x + factor, w) - col_x
    pad_c = ow * factor - w
    step = 256  # output rows per band keeps peak memory modest on huge slides
    for ob in range(0, oh, step):
        y0 = ob * factor
        y1 = min((ob + step) * factor, h)
        band = img[y0:y1].astype(np.uint32)
        bh = y1 - y0
        pb = math.ceil(bh / factor)
        pad_r = pb * factor - bh
        if pad_r or pad_c:
            band = np.pad(band, ((0, pad_r), (0, pad_c)) + ((0, 0),) * len(chans))
        sums = band.reshape((pb, factor, ow, factor) + chans).sum(
            axis=(1, 3), dtype=np.uint32)
        row_y = np.arange(pb) * factor + y0
        row_h = np.minimum(row_y + factor, h) - row_y
        area = row_h[:, None] * col_w[None, :]
        if chans:
            area = area[..., None]
        out[ob:ob + pb] = np.rint(sums / area).astype(np.uint8)
    return out


class SlidePyramid:
    """Multi-resolution slide; subclasses supply in-bounds level reads."""

    def __init__(self, slide_id: str, width: int, height: int, factors=DEFAULT_FACTORS):
        if width <= 0 or height <= 0:
            raise ValidationError(f"slide {slide_id!r}: non-positive dimensions {width}x{height}")
        self.slide_id = slide_id
        self.width = width
        self.height = height
        self.factors = tuple(sorted(factors))

    def level_size(self, factor: int):
        return math.ceil(self.width / factor), math.ceil(self.height / factor)

    def read_region(self, factor: int, x: int, y: int, w: int, h: int) -> np.ndarray:
        """Read a w x h RGB rect at the given level; out-of-bounds is white.

        Coordinates are in the level's own pixel grid.  Memory use is
        proportional to the request.
        """
        if factor not in self.factors:
            raise ValidationError(f"slide {self.slide_id!r}: no stored level with factor {factor}")
        if w <= 0 or h <= 0:
            raise ValidationError(f"non-positive region dimensions {w}x{h}")
        lw, lh = self.level_size(factor)
        out = np.full((h, w, 3), PAD_RGB[0], dtype=np.uint8)
        ix0, iy0 = max(x, 0), max(y, 0)
        ix1, iy1 = min(x + w, lw), min(y + h, lh)
        if ix0 < ix1 and iy0 < iy1:
            sub = self._read_level_rect(factor, ix0, iy0, ix1 - ix0, iy1 - iy0)
            out[iy0 - y:iy1 - y, ix0 - x:ix1 - x] = sub
        return out

    def _read_level_rect(self, factor, x, y, w, h) -> np.ndarray:
        raise NotImplementedError


class ArraySlide(SlidePyramid):
    """In-memory pyramid, used by the synthesizer and small fixtures."""

    def __init__(self, slide_id: str, level0: np.ndarray, factors=DEFAULT_FACTORS):
        super().__init__(slide_id, level0.shape[1], level0.shape[0], factors)
        self.levels = {f: box_downsample(level0, f) for f in self.factors}

    def _read_level_rect(self, factor, x, y, w, h):
        return self.levels[factor][y:y + h, x:x + w]


class DiskSlide(SlidePyramid):
    """Tile-backed pyramid streaming from disk with a small LRU tile cache."""

    def __init__(self, slide_id, width, height, factors, root: Path, cache_tiles: int = 96):
        super().__init__(slide_id, width, height, factors)
        self.root = Path(root)
        self._cache: "OrderedDict[tuple, np.ndarray]" = OrderedDict()
        self._cache_tiles = cache_tiles
        self._lock = threading.Lock()

    def _tile(self, factor, col, row) -> np.ndarray:
        key = (factor, col, row)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        path = self.root / "levels" / str(factor) / f"tile_{col}_{row}.png"
        if not path.exists():
            raise ValidationError(f"slide {self.slide_id!r}: missing tile {path.name} at factor {factor}")
        arr = np.asarray(Image.open(path).convert("RGB"))
        arr.flags.writeable = False
        with self._lock:
            self._cache[key] = arr
            while len(self._cache) > self._cache_tiles:
                self._cache.popitem(last=False)
        return arr

    def _read_level_rect(self, factor, x, y, w, h):
        out = np.empty((h, w, 3), dtype=np.uint8)
        for row in range(y // TILE_SIZE, (y + h - 1) // TILE_SIZE + 1):
            for col in range(x // TILE_SIZE, (x + w - 1) // TILE_SIZE + 1):
                tile = self._tile(factor, col, row)
                tx0, ty0 = col * TILE_SIZE, row * TILE_SIZE
                sx0, sy0 = max(x, tx0), max(y, ty0)
                sx1 = min(x + w, tx0 + tile.shape[1])
                sy1 = min(y + h, ty0 + tile.shape[0])
                out[sy0 - y:sy1 - y, sx0 - x:sx1 - x] = \
                    tile[sy0 - ty0:sy1 - ty0, sx0 - tx0:sx1 - tx0]
        return out

    def load_mask(self) -> Optional[np.ndarray]:
        path = self.root / "mask.png"
        if not path.exists():
            return None
        return load_mask(path, expect_size=(self.width, self.height), slide_id=self.slide_id)


@dataclass
class CaseRecord:
    """One clinical case: its slides, reported ratio, and outcome data."""

    case_id: str
    slide_ids: list
    r_pr: Optional[float] = None
    os_months: Optional[float] = None
    os_event: bool = False
    pfs_months: Optional[float] = None
    pfs_event: bool = False
    metastasis_at_diagnosis: Optional[bool] = False
    split: str = "test"

    def __post_init__(self):
        if not self.slide_ids:
            raise ManifestError(f"case {self.case_id!r} has no slides")
        if self.r_pr is not None and not 0.0 <= self.r_pr <= 1.0:
            raise ManifestError(f"case {self.case_id!r}: r_pr {self.r_pr} outside [0,1]")
        for name in ("os_months", "pfs_months"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ManifestError(f"case {self.case_id!r}: negative {name} {v}")


@dataclass
class Dataset:
    root: Path
    slides: dict = field(default_factory=dict)  # slide_id -> SlidePyramid
    cases: list = field(default_factory=list)

    def case(self, case_id: str) -> CaseRecord:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise ManifestError(f"unknown case {case_id!r}")


def _check_keys(obj: dict, required: set, optional: set, what: str):
    missing = required - obj.keys()
    unknown = obj.keys() - required - optional
    if missing:
        raise ManifestError(f"{what}: missing keys {sorted(missing)}")
    if unknown:
        raise ManifestError(f"{what}: unknown keys {sorted(unknown)}")


def parse_case(obj: dict) -> CaseRecord:
    _check_keys(obj, _CASE_KEYS, _CASE_OPTIONAL_KEYS, f"case {obj.get('id')!r}")
    return CaseRecord(
        case_id=obj["id"],
        slide_ids=list(obj["slides"]),
        r_pr=obj["r_pr"],
        os_months=obj["os_months"],
        os_event=bool(obj["os_event"]),
        pfs_months=obj["pfs_months"],
        pfs_event=bool(obj["pfs_event"]),
        metastasis_at_diagnosis=obj["metastasis_at_diagnosis"],
        split=obj.get("split", "test"),
    )


def load_manifest(root) -> Dataset:
    """Load a dataset directory, checking schema and referential integrity."""
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}") from e
    _check_keys(doc, {"slides", "cases"}, set(), "manifest")

    ds = Dataset(root=root)
    for s in doc["slides"]:
        _check_keys(s, _SLIDE_KEYS, set(), f"slide {s.get('id')!r}")
        sid = s["id"]
        if sid in ds.slides:
            raise ManifestError(f"duplicate slide id {sid!r}")
        ds.slides[sid] = DiskSlide(sid, s["width"], s["height"], s["levels"],
                                   root / "slides" / sid)
    seen = set()
    for c in doc["cases"]:
        rec = parse_case(c)
        if rec.case_id in seen:
            raise ManifestError(f"duplicate case id {rec.case_id!r}")
        seen.add(rec.case_id)
        for sid in rec.slide_ids:
            if sid not in ds.slides:
                raise ManifestError(
                    f"case {rec.case_id!r} references unknown slide {sid!r}")
        ds.cases.append(rec)
    return ds


def _case_to_json(c: CaseRecord) -> dict:
    obj = {
        "id": c.case_id,
        "slides": list(c.slide_ids),
        "r_pr": c.r_pr,
        "os_months": c.os_months,
        "os_event": c.os_event,
        "pfs_months": c.pfs_months,
        "pfs_event": c.pfs_event,
        "metastasis_at_diagnosis": c.metastasis_at_diagnosis,
    }
    if c.split != "test":
        obj["split"] = c.split
    return obj


def write_manifest(root, slides, cases):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    doc = {
        "slides": [
            {"id": s.slide_id, "width": s.width, "height": s.height,
             "levels": list(s.factors)}
            for s in slides
        ],
        "cases": [_case_to_json(c) for c in cases],
    }
    (root / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_slide(root, slide: ArraySlide, mask: Optional[np.ndarray] = None):
    """Write one slide's tile pyramid (and mask) under root/slides/<id>/."""
    sdir = Path(root) / "slides" / slide.slide_id
    for factor in slide.factors:
        level = slide.levels[factor]
        ldir = sdir / "levels" / str(factor)
        ldir.mkdir(parents=True, exist_ok=True)
        lh, lw = level.shape[:2]
        for row in range(math.ceil(lh / TILE_SIZE)):
            for col in range(math.ceil(lw / TILE_SIZE)):
                tile = level[row * TILE_SIZE:(row + 1) * TILE_SIZE,
                             col * TILE_SIZE:(col + 1) * TILE_SIZE]
                Image.fromarray(tile).save(ldir / f"tile_{col}_{row}.png")
    if mask is not None:
        save_mask(sdir / "mask.png", mask)


def save_mask(path, mask: np.ndarray):
    """Write a label mask as an indexed PNG (pixel value = class code)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    palette = [0] * (256 * 3)
    for cls, rgb in CANONICAL_COLORS.items():
        palette[cls * 3:cls * 3 + 3] = rgb
    img.putpalette(palette)
    img.save(path)


def load_mask(path, expect_size=None, slide_id=None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"mask not found: {path}")
    img = Image.open(path)
    if img.mode not in ("L", "P"):
        raise ValidationError(f"mask {path}: expected 8-bit single channel, got mode {img.mode}")
    arr = np.asarray(img).astype(np.uint8)
    if arr.max(initial=0) >= NUM_CLASSES:
        raise ValidationError(f"mask {path}: invalid class code {int(arr.max())}")
    if expect_size is not None:
        w, h = expect_size
        if arr.shape != (h, w):
            who = f" for slide {slide_id!r}" if slide_id else ""
            raise ValidationError(
                f"mask {path}{who}: size {arr.shape[1]}x{arr.shape[0]} != slide {w}x{h}")
    return arr


def read_mask_region(mask: np.ndarray, x: int, y: int, w: int, h: int) -> np.ndarray:
    """Crop with Blank padding outside the mask extent."""
    out = np.full((h, w), int(PAD_CLASS), dtype=np.uint8)
    mh, mw = mask.shape
    ix0, iy0 = max(x, 0), max(y, 0)
    ix1, iy1 = min(x + w, mw), min(y + h, mh)
    if ix0 < ix1 and iy0 < iy1:
        out[iy0 - y:iy1 - y, ix0 - x:ix1 - x] = mask[iy0:iy1, ix0:ix1]
    return out
