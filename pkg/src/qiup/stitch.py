"""Weighted mosaicking of laterally translated reconstructions.

Each tile is resampled onto a common grid and blended with a per-pixel
weight, by default its illumination envelope, so that tile centers dominate
over the dim rim of the birth zone.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .interferometer import _write_manifest, illumination_envelope, read_manifest
from .reconstruct import ReconMaps
from .raster import read_f32, write_f32

logger = logging.getLogger(__name__)

MOSAIC_MAGIC = "QIUPMOSAIC1"
DEFAULT_WEIGHT_FLOOR = 0.05


@dataclass
class Tile:
    """One reconstruction placed at ``offset = (x, y)`` (m) of its pixel-(0, 0) corner."""

    maps: ReconMaps
    offset: tuple[float, float]
    weight: np.ndarray | None = None

    def weights(self) -> np.ndarray:
        if self.weight is not None:
            w = np.asarray(self.weight, dtype=float)
        elif self.maps.setup is not None:
            h, w_px = self.maps.shape
            w = illumination_envelope(self.maps.setup, w_px, h, self.maps.pixel_pitch).values
        else:
            w = np.ones(self.maps.shape)
        if np.any(w < 0):
            raise ValueError("tile weights must be non-negative")
        return np.where(self.maps.valid, w, 0.0)


@dataclass
class Mosaic:
    values: np.ndarray
    weight: np.ndarray
    valid: np.ndarray
    gaps: np.ndarray
    pixel_pitch: float
    origin: tuple[float, float]
    selection: str = "transmission"
    meta: dict = field(default_factory=dict)

    @property
    def gap_count(self) -> int:
        return int(self.gaps.sum())


def _footprint(tile: Tile):
    h, w = tile.maps.shape
    x0, y0 = tile.offset
    return x0, y0, x0 + w * tile.maps.pixel_pitch, y0 + h * tile.maps.pixel_pitch


def stitch(tiles: list[Tile], selection: str = "transmission", weight_floor: float = DEFAULT_WEIGHT_FLOOR) -> Mosaic:
    """Blend tiles into one mosaic.

    Values and weights are resampled bilinearly and accumulated as
    ``sum(w v) / sum(w)``; pixels whose total weight does not exceed
    ``weight_floor`` are invalid. Mosaic pixels outside every tile's
    footprint are reported in ``gaps``. ``selection="phase"`` blends unit
    phasors instead of raw angles.

    Tiles are accumulated in a canonical order (by offset), so the result
    does not depend on the order of ``tiles``.
    """
    if not tiles:
        raise ValueError("no tiles to stitch")
    pitch = tiles[0].maps.pixel_pitch
    if any(not math.isclose(t.maps.pixel_pitch, pitch, rel_tol=1e-9) for t in tiles):
        raise ValueError("all tiles must share one pixel pitch")
    boxes = [_footprint(t) for t in tiles]
    x_min = min(b[0] for b in boxes)
    y_min = min(b[1] for b in boxes)
    width = int(round((max(b[2] for b in boxes) - x_min) / pitch))
    height = int(round((max(b[3] for b in boxes) - y_min) / pitch))

    is_phase = selection == "phase"
    acc = np.zeros((height, width), dtype=complex if is_phase else float)
    wsum = np.zeros((height, width))
    covered = np.zeros((height, width), dtype=bool)
    order = sorted(range(len(tiles)), key=lambda k: (tiles[k].offset[1], tiles[k].offset[0], k))
    for k in order:
        tile = tiles[k]
        values = np.asarray(tile.maps.select(selection), dtype=float)
        w = tile.weights()
        th, tw = values.shape
        ox = (tile.offset[0] - x_min) / pitch
        oy = (tile.offset[1] - y_min) / pitch
        # mosaic pixel m maps to tile pixel m - o (both measured from pixel centers)
        cols = np.arange(width) - ox
        rows = np.arange(height) - oy
        c_in = (cols > -1) & (cols < tw)
        r_in = (rows > -1) & (rows < th)
        covered |= ((cols >= -0.5) & (cols < tw - 0.5))[None, :] & ((rows >= -0.5) & (rows < th - 0.5))[:, None]
        if not c_in.any() or not r_in.any():
            continue
        rr, cc = np.meshgrid(rows[r_in], cols[c_in], indexing="ij")
        window = np.ix_(np.nonzero(r_in)[0], np.nonzero(c_in)[0])

        def sample(a):
            return ndimage.map_coordinates(a, [rr, cc], order=1, mode="constant", cval=0.0)

        w_s = sample(w)
        if is_phase:
            acc[window] += sample(w * np.cos(values)) + 1j * sample(w * np.sin(values))
        else:
            acc[window] += sample(w * values)
        wsum[window] += w_s

    valid = wsum > weight_floor
    if is_phase:
        out = np.where(valid, np.angle(acc), 0.0)
    else:
        out = np.divide(acc, wsum, out=np.zeros_like(wsum), where=valid)
    gaps = ~covered
    if gaps.any():
        logger.warning("mosaic has %d pixels outside every tile", int(gaps.sum()))
    return Mosaic(out, wsum, valid, gaps, pitch, (x_min, y_min), selection)


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float((a * a).sum() * (b * b).sum()))
    return float((a * b).sum() / denom) if denom > 0 else 0.0


def _overlap(ta: Tile, tb: Tile, dx: int, dy: int, selection: str, min_weight: float):
    """Co-registered pixels of ``ta`` and ``tb`` when ``tb`` sits ``(dx, dy)`` px from ``ta``."""
    va, vb = ta.maps.select(selection), tb.maps.select(selection)
    wa, wb = ta.weights(), tb.weights()
    ha, wa_px = va.shape
    hb, wb_px = vb.shape
    x0, x1 = max(0, dx), min(wa_px, dx + wb_px)
    y0, y1 = max(0, dy), min(ha, dy + hb)
    if x1 <= x0 or y1 <= y0:
        return None, None
    sa = np.s_[y0:y1, x0:x1]
    sb = np.s_[y0 - dy : y1 - dy, x0 - dx : x1 - dx]
    keep = (wa[sa] > min_weight) & (wb[sb] > min_weight)
    if keep.sum() < 16:
        return None, None
    return va[sa][keep], vb[sb][keep]


@dataclass(frozen=True)
class Registration:
    offsets: list[tuple[float, float]]
    flagged_pairs: list[tuple[int, int]]
    scores: list[float]


def refine_offsets(
    tiles: list[Tile],
    search: int = 5,
    min_peak: float = 0.2,
    selection: str = "transmission",
    min_weight: float = 0.3,
) -> Registration:
    """Refine nominal stage offsets by normalized cross-correlation.

    Tiles are treated as a scan path: each tile is registered against its
    predecessor over integer shifts within ``+-search`` px of the nominal
    relative offset. A pair whose best correlation is below ``min_peak``
    keeps its nominal relative offset and is flagged. No tile moves more
    than ``search`` px from its nominal position.
    """
    if not tiles:
        return Registration([], [], [])
    pitch = tiles[0].maps.pixel_pitch
    nominal = [tuple(t.offset) for t in tiles]
    refined = [nominal[0]]
    flagged, scores = [], []
    for k in range(1, len(tiles)):
        ndx = int(round((nominal[k][0] - nominal[k - 1][0]) / pitch))
        ndy = int(round((nominal[k][1] - nominal[k - 1][1]) / pitch))
        best, best_shift = -np.inf, (0, 0)
        for sy in range(-search, search + 1):
            for sx in range(-search, search + 1):
                a, b = _overlap(tiles[k - 1], tiles[k], ndx + sx, ndy + sy, selection, min_weight)
                if a is None:
                    continue
                score = _ncc(a, b)
                # ties resolve toward the smallest shift
                if score > best + 1e-12 or (abs(score - best) <= 1e-12 and sx * sx + sy * sy < sum(s * s for s in best_shift)):
                    best, best_shift = score, (sx, sy)
        scores.append(float(best) if np.isfinite(best) else 0.0)
        if not best >= min_peak:
            flagged.append((k - 1, k))
            best_shift = (0, 0)
        prev = refined[k - 1]
        x = prev[0] + (ndx + best_shift[0]) * pitch
        y = prev[1] + (ndy + best_shift[1]) * pitch
        limit = search * pitch
        x = min(max(x, nominal[k][0] - limit), nominal[k][0] + limit)
        y = min(max(y, nominal[k][1] - limit), nominal[k][1] + limit)
        refined.append((x, y))
    return Registration(refined, flagged, scores)


# --- files ----------------------------------------------------------------------------


def read_tile_list(path) -> list[tuple[Path, tuple[float, float]]]:
    """Parse a tile list CSV with header ``maps_dir,offset_x_m,offset_y_m``.

    Relative directories resolve against the list file's directory.
    """
    path = Path(path)
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"maps_dir", "offset_x_m", "offset_y_m"}:
            raise ValueError(f"{path}: expected header maps_dir,offset_x_m,offset_y_m")
        for row in reader:
            maps_dir = Path(row["maps_dir"])
            if not maps_dir.is_absolute():
                maps_dir = path.parent / maps_dir
            entries.append((maps_dir, (float(row["offset_x_m"]), float(row["offset_y_m"]))))
    return entries


def write_tile_list(path, entries) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("maps_dir", "offset_x_m", "offset_y_m"))
        for maps_dir, (x, y) in entries:
            writer.writerow((str(maps_dir), repr(float(x)), repr(float(y))))


def save_mosaic(mosaic: Mosaic, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_f32(directory / "mosaic.f32", mosaic.values)
    write_f32(directory / "weight.f32", mosaic.weight)
    write_f32(directory / "valid.f32", mosaic.valid.astype(float))
    write_f32(directory / "gaps.f32", mosaic.gaps.astype(float))
    height, width = mosaic.values.shape
    _write_manifest(
        directory / "mosaic_manifest",
        MOSAIC_MAGIC,
        {
            "mosaic": {
                "width": str(width),
                "height": str(height),
                "pixel_pitch": repr(float(mosaic.pixel_pitch)),
                "origin_x": repr(float(mosaic.origin[0])),
                "origin_y": repr(float(mosaic.origin[1])),
                "selection": mosaic.selection,
                "valid_pixels": str(int(mosaic.valid.sum())),
                "gap_pixels": str(mosaic.gap_count),
            },
            "provenance": {k: str(v) for k, v in {**mosaic.meta, **(extra or {})}.items()},
        },
    )
    return directory


def load_mosaic(directory) -> Mosaic:
    directory = Path(directory)
    info = read_manifest(directory / "mosaic_manifest", MOSAIC_MAGIC)["mosaic"]
    shape = (int(info["height"]), int(info["width"]))
    return Mosaic(
        values=read_f32(directory / "mosaic.f32", shape),
        weight=read_f32(directory / "weight.f32", shape),
        valid=read_f32(directory / "valid.f32", shape) > 0.5,
        gaps=read_f32(directory / "gaps.f32", shape) > 0.5,
        pixel_pitch=float(info["pixel_pitch"]),
        origin=(float(info["origin_x"]), float(info["origin_y"])),
        selection=info["selection"],
    )
