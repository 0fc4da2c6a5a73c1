"""Segmentation backends and the full-slide inference loop.

Three interchangeable backends produce a 256x256 label patch per tile:

* oracle    — copies the ground-truth mask (requires one).
* chromatic — nearest canonical color per 20x pixel, with optional seeded
              mislabel injection for fault studies.
* external  — batch-file protocol to an arbitrary external process.

run_slide assembles effective tile extents into a full LabelMask; every
pixel is written exactly once, so the result is byte-identical for any
worker count.
"""

import json
import shlex
import shutil
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import BackendError, ValidationError
from .slide_store import TILE_SIZE, read_mask_region
from .tiler import MultiMagPatch, TileCoord, extract, schedule
from .tissue import CANONICAL_COLORS, NUM_CLASSES


@dataclass
class BackendConfig:
    kind: str  # oracle | chromatic | external
    mislabel_rate: float = 0.0  # chromatic fault injection
    seed: int = 0
    command: str = ""  # external
    workdir: Optional[str] = None
    batch_size: int = 16
    timeout: float = 300.0

    def __post_init__(self):
        if self.kind not in ("oracle", "chromatic", "external"):
            raise ValidationError(f"unknown backend kind {self.kind!r}")
        if self.kind == "external" and not self.command:
            raise ValidationError("external backend requires a command")


class OracleBackend:
    """Returns the ground-truth mask crop for each tile."""

    def __init__(self, mask: np.ndarray):
        self.mask = mask

    def segment(self, patch: MultiMagPatch) -> np.ndarray:
        t = patch.tile
        return read_mask_region(self.mask, t.x0, t.y0, TILE_SIZE, TILE_SIZE)


class ChromaticBackend:
    """Nearest canonical color in RGB, ties broken toward the lowest code.

    A pure function of the 20x patch; p10/p5 are accepted but unused.
    Optional fault injection relabels a seeded pseudo-random pixel subset
    (keyed by tile coordinate) to a uniformly random other class.
    """

    def __init__(self, mislabel_rate: float = 0.0, seed: int = 0):
        codes = sorted(int(c) for c in CANONICAL_COLORS)
        self.codes = np.array(codes, dtype=np.uint8)
        self.palette = np.array([CANONICAL_COLORS[c] for c in codes], dtype=np.int32)
        self.mislabel_rate = mislabel_rate
        self.seed = seed

    def segment(self, patch: MultiMagPatch) -> np.ndarray:
        p = patch.p20.astype(np.int32)
        best_dist = None
        label = None
        for idx, (r, g, b) in enumerate(self.palette):
            dist = (p[..., 0] - r) ** 2 + (p[..., 1] - g) ** 2 + (p[..., 2] - b) ** 2
            if best_dist is None:
                best_dist = dist
                label = np.full(dist.shape, self.codes[idx], dtype=np.uint8)
            else:
                closer = dist < best_dist  # strict: ties keep the lower code
                best_dist = np.where(closer, dist, best_dist)
                label[closer] = self.codes[idx]
        if self.mislabel_rate > 0:
            t = patch.tile
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed & 0x7FFFFFFF, t.col, t.row]))
            flip = rng.random(label.shape) < self.mislabel_rate
            # shift by 1..6 within codes 1..7: uniform over the other classes
            shift = rng.integers(1, NUM_CLASSES - 1, size=label.shape)
            label = np.where(flip, ((label - 1 + shift) % (NUM_CLASSES - 1) + 1).astype(np.uint8),
                             label)
        return label


class ExternalBackend:
    """Batch-file protocol to an external inference process.

    For each batch the pipeline writes `batch.json` plus three PNGs per
    item into a fresh directory, invokes the command with that directory
    as its sole argument, and reads back `out/<id>.png` label patches.
    """

    def __init__(self, config: BackendConfig):
        self.config = config

    def segment_batch(self, patches):
        cfg = self.config
        batch_dir = Path(tempfile.mkdtemp(prefix="batch_", dir=cfg.workdir))
        try:
            items = []
            for patch in patches:
                t = patch.tile
                item_id = f"t_{t.col}_{t.row}"
                entry = {"id": item_id}
                for name, arr in (("p20", patch.p20), ("p10", patch.p10), ("p5", patch.p5)):
                    fname = f"{item_id}_{name}.png"
                    Image.fromarray(arr).save(batch_dir / fname)
                    entry[name] = fname
                items.append(entry)
            (batch_dir / "batch.json").write_text(json.dumps({"items": items}))

            argv = shlex.split(cfg.command) + [str(batch_dir)]
            try:
                proc = subprocess.run(argv, cwd=cfg.workdir, timeout=cfg.timeout,
                                      capture_output=True, text=True)
            except subprocess.TimeoutExpired as e:
                raise BackendError(f"external backend timed out after {cfg.timeout}s") from e
            except OSError as e:
                raise BackendError(f"cannot run external backend: {e}") from e
            if proc.returncode != 0:
                raise BackendError(
                    f"external backend exited {proc.returncode}: {proc.stderr.strip()[:500]}")

            labels = []
            for entry in items:
                out_path = batch_dir / "out" / f"{entry['id']}.png"
                if not out_path.exists():
                    raise BackendError(f"external backend produced no output for {entry['id']}")
                img = Image.open(out_path)
                if img.mode not in ("L", "P"):
                    raise BackendError(
                        f"{entry['id']}: expected 8-bit single-channel output, got {img.mode}")
                arr = np.asarray(img).astype(np.uint8)
                if arr.shape != (TILE_SIZE, TILE_SIZE):
                    raise BackendError(
                        f"{entry['id']}: output is {arr.shape[1]}x{arr.shape[0]}, "
                        f"expected {TILE_SIZE}x{TILE_SIZE}")
                if arr.max(initial=0) >= NUM_CLASSES:
                    raise BackendError(f"{entry['id']}: invalid class code {int(arr.max())}")
                labels.append(arr)
            return labels
        finally:
            shutil.rmtree(batch_dir, ignore_errors=True)


def make_backend(config: BackendConfig, mask: Optional[np.ndarray] = None):
    if config.kind == "oracle":
        if mask is None:
            raise ValidationError("oracle backend requires a ground-truth mask")
        return OracleBackend(mask)
    if config.kind == "chromatic":
        return ChromaticBackend(config.mislabel_rate, config.seed)
    return ExternalBackend(config)


def run_slide(slide, config: BackendConfig, mask: Optional[np.ndarray] = None,
              workers: int = 1) -> np.ndarray:
    """Segment a whole slide; returns a full-size LabelMask array."""
    backend = make_backend(config, mask)
    tiles = schedule(slide.width, slide.height)
    out = np.zeros((slide.height, slide.width), dtype=np.uint8)

    def write_back(tile: TileCoord, label: np.ndarray):
        out[tile.y0:tile.y0 + tile.h, tile.x0:tile.x0 + tile.w] = label[:tile.h, :tile.w]

    if config.kind == "external":
        ext: ExternalBackend = backend
        for start in range(0, len(tiles), config.batch_size):
            chunk = tiles[start:start + config.batch_size]
            patches = [extract(slide, t) for t in chunk]
            for tile, label in zip(chunk, ext.segment_batch(patches)):
                write_back(tile, label)
        return out

    def do_tile(tile: TileCoord):
        try:
            write_back(tile, backend.segment(extract(slide, tile)))
        except Exception as e:
            raise BackendError(
                f"slide {slide.slide_id!r} tile ({tile.col},{tile.row}): {e}") from e

    if workers <= 1:
        for tile in tiles:
            do_tile(tile)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # tiles write disjoint regions, so completion order is irrelevant
            for _ in pool.map(do_tile, tiles):
                pass
    return out
