"""Percentile harmonization of high-resolution reference tiles onto a coarse grid."""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from typing import Sequence

import numpy as np

from .grid import BBox, RasterGrid, pixel_bbox

IntersectionTable = dict  # coarse tile id -> list[(hires tile id, overlap BBox)]


def build_intersection_table(coarse_tiles: Sequence[BBox], hires_tiles: Sequence[BBox]) -> IntersectionTable:
    """One-to-many table of positive-area overlaps, using a uniform bucket index."""
    table: IntersectionTable = {}
    if not coarse_tiles or not hires_tiles:
        return table
    min_x = min(t.min_x for t in hires_tiles)
    min_y = min(t.min_y for t in hires_tiles)
    cell = max(max(t.width for t in hires_tiles), max(t.height for t in hires_tiles))
    buckets: dict[tuple[int, int], list[int]] = defaultdict(list)
    for hid, t in enumerate(hires_tiles):
        for bx in range(math.floor((t.min_x - min_x) / cell), math.floor((t.max_x - min_x) / cell) + 1):
            for by in range(math.floor((t.min_y - min_y) / cell), math.floor((t.max_y - min_y) / cell) + 1):
                buckets[(bx, by)].append(hid)
    for cid, c in enumerate(coarse_tiles):
        candidates = set()
        for bx in range(math.floor((c.min_x - min_x) / cell), math.floor((c.max_x - min_x) / cell) + 1):
            for by in range(math.floor((c.min_y - min_y) / cell), math.floor((c.max_y - min_y) / cell) + 1):
                candidates.update(buckets.get((bx, by), ()))
        hits = []
        for hid in sorted(candidates):
            overlap = c.intersection(hires_tiles[hid])
            if overlap is not None:
                hits.append((hid, overlap))
        if hits:
            table[cid] = hits
    return table


def _valid_centers(hires: RasterGrid, band: int = 0):
    x, y = hires.pixel_centers()
    v = hires.data[:, :, band]
    ok = ~hires.nodata_mask()[:, :, band]
    return x[ok], y[ok], v[ok].astype(np.float64)


def zonal_percentile(zone: BBox, hires: RasterGrid, q: float = 98.0, band: int = 0) -> float:
    """Linear-interpolation percentile of valid hires pixels whose center lies in ``zone``.

    Returns ``hires.nodata`` when the zone holds no valid pixel.
    """
    x, y, v = _valid_centers(hires, band)
    inside = zone.contains(x, y)
    if not inside.any():
        return hires.nodata
    return float(np.percentile(v[inside], q))


def zonal_p98(zone: BBox, hires: RasterGrid) -> float:
    return zonal_percentile(zone, hires, 98.0)


def harmonize(
    coarse: RasterGrid, hires_tiles: Sequence[RasterGrid], q: float = 98.0, nodata: float | None = None
) -> RasterGrid:
    """Reduce hires pixels inside every coarse pixel to their ``q``-th percentile.

    Tiles are read in order; where two tiles cover the same pixel center the
    later tile's value is used (with a warning if the values differ).
    """
    nodata = coarse.nodata if nodata is None else nodata
    out = np.full((coarse.height, coarse.width), nodata, dtype=np.float64)
    table = build_intersection_table([coarse.bbox], [t.bbox for t in hires_tiles])
    keys, values, cells = [], [], []
    for hid, _ in table.get(0, []):
        x, y, v = _valid_centers(hires_tiles[hid])
        col = np.floor((x - coarse.origin_x) / coarse.pixel_size).astype(np.int64)
        row = np.floor((y - coarse.origin_y) / coarse.pixel_size).astype(np.int64)
        keep = (col >= 0) & (col < coarse.width) & (row >= 0) & (row < coarse.height)
        keys.append(np.stack([np.round(x[keep], 6), np.round(y[keep], 6)], axis=1))
        values.append(v[keep])
        cells.append(row[keep] * coarse.width + col[keep])
    if keys:
        keys = np.concatenate(keys)
        values = np.concatenate(values)
        cells = np.concatenate(cells)
        # last occurrence of each pixel center wins
        _, first_rev, inverse = np.unique(keys[::-1], axis=0, return_index=True, return_inverse=True)
        if len(first_rev) < len(keys):
            rev_vals = values[::-1]
            if np.any(rev_vals != rev_vals[first_rev][inverse.ravel()]):
                warnings.warn("overlapping hires tiles disagree; using the last tile read", RuntimeWarning)
            pick = len(keys) - 1 - first_rev
            values, cells = values[pick], cells[pick]
        order = np.lexsort((values, cells))
        values, cells = values[order], cells[order]
        starts = np.flatnonzero(np.r_[True, cells[1:] != cells[:-1]])
        ends = np.r_[starts[1:], len(cells)]
        flat = out.ravel()
        for s, e in zip(starts, ends):
            flat[cells[s]] = np.percentile(values[s:e], q)
    return coarse.with_data(out[:, :, None], nodata=nodata)


def coarse_pixel_zones(coarse: RasterGrid) -> list[BBox]:
    return [pixel_bbox(coarse, c, r) for r in range(coarse.height) for c in range(coarse.width)]
