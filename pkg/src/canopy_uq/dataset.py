"""Spatial tiling, tile-level cross-validation folds, patch extraction,
a synthetic scene generator and the binary patch-record format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np
from scipy import ndimage

from .grid import DEFAULT_NODATA, BBox, RasterGrid

RECORD_MAGIC = b"CUQR"
RECORD_VERSION = 1
_FILE_HEADER = struct.Struct("<4sIII")
_REC_HEADER = struct.Struct("<IHII")


@dataclass(frozen=True)
class TileGrid:
    extent: BBox
    rows: int
    cols: int
    tiles: tuple[BBox, ...]

    @property
    def ids(self) -> list[int]:
        return list(range(len(self.tiles)))

    def __len__(self) -> int:
        return len(self.tiles)


def make_tiles(extent: BBox, rows: int, cols: int) -> TileGrid:
    """Split ``extent`` into ``rows x cols`` equal tiles, ids row-major from the south-west."""
    if rows < 1 or cols < 1:
        raise ValueError("tile grid needs at least one row and one column")
    if not (extent.max_x > extent.min_x and extent.max_y > extent.min_y):
        raise ValueError("degenerate extent")
    # edges from linspace so the outer edges hit the extent exactly
    xs = np.linspace(extent.min_x, extent.max_x, cols + 1)
    ys = np.linspace(extent.min_y, extent.max_y, rows + 1)
    xs[0], xs[-1], ys[0], ys[-1] = extent.min_x, extent.max_x, extent.min_y, extent.max_y
    tiles = tuple(
        BBox(float(xs[c]), float(ys[r]), float(xs[c + 1]), float(ys[r + 1])) for r in range(rows) for c in range(cols)
    )
    return TileGrid(extent, rows, cols, tiles)


def tile_windows(raster: RasterGrid, tiles: TileGrid) -> dict[int, tuple[int, int, int, int]]:
    """Pixel window ``(col0, row0, col1, row1)`` (exclusive ends) of each tile.

    A pixel belongs to the tile containing its center.
    """
    out = {}
    for tid, t in enumerate(tiles.tiles):
        c0 = math.ceil((t.min_x - raster.origin_x) / raster.pixel_size - 0.5)
        c1 = math.ceil((t.max_x - raster.origin_x) / raster.pixel_size - 0.5)
        r0 = math.ceil((t.min_y - raster.origin_y) / raster.pixel_size - 0.5)
        r1 = math.ceil((t.max_y - raster.origin_y) / raster.pixel_size - 0.5)
        c0, c1 = max(c0, 0), min(c1, raster.width)
        r0, r1 = max(r0, 0), min(r1, raster.height)
        if c1 > c0 and r1 > r0:
            out[tid] = (c0, r0, c1, r1)
    return out


def tile_id_raster(raster: RasterGrid, tiles: TileGrid) -> np.ndarray:
    """``(h, w)`` int array of tile ids (-1 outside every tile)."""
    ids = np.full((raster.height, raster.width), -1, dtype=np.int64)
    for tid, (c0, r0, c1, r1) in tile_windows(raster, tiles).items():
        ids[r0:r1, c0:c1] = tid
    return ids


@dataclass(frozen=True)
class FoldSpec:
    fold_id: int
    test_tile_ids: tuple[int, ...]
    train_tile_ids: tuple[int, ...]
    # (train, validation) tile id tuples
    sub_folds: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...] = field(default=())


def spatial_folds(tiles: TileGrid | int, k: int = 5, seed: int = 0, n_sub: int = 5) -> list[FoldSpec]:
    """Random tile-level k-fold split, each training set split again into ``n_sub`` sub-folds."""
    n = tiles if isinstance(tiles, int) else len(tiles)
    if k < 2:
        raise ValueError("need at least two folds")
    if k > n:
        raise ValueError(f"cannot make {k} folds from {n} tiles")
    rng = np.random.default_rng(seed)
    groups = np.array_split(rng.permutation(n), k)
    folds = []
    for fold_id, test in enumerate(groups):
        test_ids = tuple(sorted(int(t) for t in test))
        train_ids = tuple(sorted(set(range(n)) - set(test_ids)))
        if n_sub > len(train_ids):
            raise ValueError(f"cannot make {n_sub} sub-folds from {len(train_ids)} training tiles")
        subs = []
        for val in np.array_split(rng.permutation(np.array(train_ids)), n_sub):
            val_ids = tuple(sorted(int(v) for v in val))
            subs.append((tuple(t for t in train_ids if t not in val_ids), val_ids))
        folds.append(FoldSpec(fold_id, test_ids, train_ids, tuple(subs)))
    return folds


@dataclass
class PatchRecord:
    covariates: np.ndarray  # (w, w, c) float32
    target: np.ndarray  # (w, w) float32, nodata where invalid
    valid_mask: np.ndarray  # (w, w) bool
    tile_id: int = 0
    year: int = 0
    col: int = 0
    row: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatchRecord):
            return NotImplemented
        return (
            (self.tile_id, self.year, self.col, self.row) == (other.tile_id, other.year, other.col, other.row)
            and self.covariates.tobytes() == other.covariates.tobytes()
            and self.target.tobytes() == other.target.tobytes()
            and np.array_equal(self.valid_mask, other.valid_mask)
        )


def window_origins(length: int, w: int, stride: int) -> list[int]:
    """Start offsets of full windows of size ``w`` along an axis."""
    if length < w:
        return []
    return list(range(0, length - w + 1, stride))


def extract_patches(
    covariates: RasterGrid,
    target: RasterGrid,
    w: int = 64,
    overlap: float = 0.25,
    min_density: float = 0.01,
    tiles: TileGrid | None = None,
    year: int = 0,
) -> Iterator[PatchRecord]:
    """Slide a ``w x w`` window (stride ``round(w * (1 - overlap))``) and yield dense-enough patches.

    With ``tiles`` the windows stay inside each tile; otherwise the whole raster
    is treated as tile 0.
    """
    if not covariates.same_geometry(target):
        raise ValueError("covariates and target must share grid geometry")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    stride = max(1, round(w * (1 - overlap)))
    min_valid = math.ceil(min_density * w * w)
    tgt = target.data[:, :, 0]
    valid = target.valid_mask() & covariates.valid_mask()
    cov = covariates.data.astype(np.float32, copy=False)
    if tiles is None:
        windows = {0: (0, 0, covariates.width, covariates.height)}
    else:
        windows = tile_windows(covariates, tiles)
    for tid, (c0, r0, c1, r1) in windows.items():
        for dr in window_origins(r1 - r0, w, stride):
            for dc in window_origins(c1 - c0, w, stride):
                r, c = r0 + dr, c0 + dc
                mask = valid[r : r + w, c : c + w]
                if mask.sum() < min_valid:
                    continue
                t = np.where(mask, tgt[r : r + w, c : c + w], target.nodata).astype(np.float32)
                yield PatchRecord(
                    covariates=np.ascontiguousarray(cov[r : r + w, c : c + w]),
                    target=t,
                    valid_mask=mask.copy(),
                    tile_id=tid,
                    year=year,
                    col=c,
                    row=r,
                )


# --------------------------------------------------------------------------
# synthetic scene


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return (f - f.mean()) / f.std()


def synth_scene(
    seed: int = 0,
    size: int = 640,
    outlier_rate: float = 0.05,
    pixel_size: float = 30.0,
    along_track: int = 2,
    across_track: int = 20,
) -> tuple[RasterGrid, RasterGrid, RasterGrid]:
    """Synthetic covariates, dense canopy height and a sparse GEDI-like target.

    Heights live in [0, 40] m with a long right tail (tall stands are rare).
    Covariates are fixed nonlinear responses to height (saturating optical,
    log-like C-band, slowly saturating L-band, seasonal phase-shifted
    greenness) plus pixel noise, a smooth moisture field that shifts the
    optical and radar channels independently of height, and two coordinate
    channels. The sparse target samples the truth on north-south tracks every
    ``across_track`` columns, one shot every ``along_track`` rows.
    """
    if size < 64:
        raise ValueError("synthetic scene must be at least 64 pixels across")
    rng = np.random.default_rng(seed)
    broad = _smooth_field(rng, size, size / 16)
    fine = _smooth_field(rng, size, 3.0)
    latent = 0.8 * broad + 0.6 * fine
    u = ndimage.gaussian_filter(np.clip(0.5 * (1 + np.tanh(latent / 1.2)), 0, 1), 0.7)
    height = np.clip(40.0 * u**3, 0.0, 40.0)
    texture = _smooth_field(rng, size, 1.5)
    # confounds height at the scale of a stand, so spatial context cannot average it out
    moisture = 0.5 * _smooth_field(rng, size, 3.0)

    hn = height / 40.0
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    channels = [
        0.35 - 0.25 * (1 - np.exp(-height / 12.0)) + 0.02 * moisture,  # red-like, saturating
        0.20 + 0.25 * (1 - np.exp(-height / 10.0)) + 0.02 * texture,  # nir-like
        np.log1p(height) / np.log(41.0) + 0.1 * moisture,  # C-band backscatter
        0.1 + 0.9 * np.expm1(-height / 20.0) / np.expm1(-2.0) + 0.05 * texture + 0.1 * moisture,  # L-band
        np.sin(2 * np.pi * (0.15 + 0.6 * hn)),  # summer greenness phase
        np.sin(2 * np.pi * (0.40 + 0.6 * hn)),  # fall greenness phase
        xx,
        yy,
    ]
    noise = [0.02, 0.02, 0.05, 0.05, 0.08, 0.08, 0.0, 0.0]
    cov = np.stack([ch + s * rng.standard_normal((size, size)) for ch, s in zip(channels, noise)], axis=-1)

    sparse = np.full((size, size), DEFAULT_NODATA, dtype=np.float32)
    rows = np.arange(0, size, along_track)
    cols = np.arange(across_track // 2, size, across_track)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    values = height[rr, cc].astype(np.float32)
    n_out = int(round(outlier_rate * len(values)))
    if n_out:
        idx = rng.choice(len(values), n_out, replace=False)
        values[idx] = rng.uniform(0.0, 40.0, n_out).astype(np.float32)
    sparse[rr, cc] = values

    geo = dict(origin_x=0.0, origin_y=0.0, pixel_size=pixel_size, nodata=DEFAULT_NODATA)
    return (
        RasterGrid(cov.astype(np.float32), **geo),
        RasterGrid(height.astype(np.float32), **geo),
        RasterGrid(sparse, **geo),
    )


# --------------------------------------------------------------------------
# record files


class RecordFormatError(ValueError):
    def __init__(self, message: str, record_index: int | None = None):
        super().__init__(message)
        self.record_index = record_index


def _record_size(w: int, c: int) -> int:
    return _REC_HEADER.size + 4 * w * w * c + 4 * w * w + (w * w + 7) // 8


def write_records(path, records: Iterable[PatchRecord], w: int | None = None, c: int | None = None) -> int:
    """Write a record stream; returns the number written.

    ``w`` and ``c`` are taken from the first record unless given (they must be
    given to write an empty file readable with a known shape).
    """
    it = iter(records)
    first = next(it, None)
    if first is not None:
        w = first.covariates.shape[0] if w is None else w
        c = first.covariates.shape[2] if c is None else c
    w = 0 if w is None else w
    c = 0 if c is None else c
    n = 0
    with open(path, "wb") as fh:
        fh.write(_FILE_HEADER.pack(RECORD_MAGIC, RECORD_VERSION, w, c))
        if first is None:
            return 0
        for rec in _chain(first, it):
            if rec.covariates.shape != (w, w, c) or rec.target.shape != (w, w):
                raise ValueError(f"record {n} has shape {rec.covariates.shape}, file expects {(w, w, c)}")
            fh.write(_REC_HEADER.pack(rec.tile_id, rec.year, rec.col, rec.row))
            fh.write(np.ascontiguousarray(rec.covariates, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(rec.target, dtype="<f4").tobytes())
            fh.write(np.packbits(rec.valid_mask.ravel(), bitorder="little").tobytes())
            n += 1
    return n


def _chain(first, rest):
    yield first
    yield from rest


def _read_header(fh: BinaryIO, path) -> tuple[int, int]:
    head = fh.read(_FILE_HEADER.size)
    if len(head) < _FILE_HEADER.size:
        raise RecordFormatError(f"{path}: truncated file header")
    magic, version, w, c = _FILE_HEADER.unpack(head)
    if magic != RECORD_MAGIC:
        raise RecordFormatError(f"{path}: bad magic {magic!r}")
    if version != RECORD_VERSION:
        raise RecordFormatError(f"{path}: unsupported record version {version}")
    return w, c


def iter_records(path) -> Iterator[PatchRecord]:
    with open(path, "rb") as fh:
        w, c = _read_header(fh, path)
        size = _record_size(w, c)
        nbits = (w * w + 7) // 8
        index = 0
        while True:
            buf = fh.read(size)
            if not buf:
                return
            if len(buf) < size:
                raise RecordFormatError(
                    f"{path}: record {index} truncated ({len(buf)} of {size} bytes)", record_index=index
                )
            tile_id, year, col, row = _REC_HEADER.unpack_from(buf)
            off = _REC_HEADER.size
            cov = np.frombuffer(buf, "<f4", w * w * c, off).reshape(w, w, c).astype(np.float32)
            off += 4 * w * w * c
            tgt = np.frombuffer(buf, "<f4", w * w, off).reshape(w, w).astype(np.float32)
            off += 4 * w * w
            bits = np.frombuffer(buf, np.uint8, nbits, off)
            mask = np.unpackbits(bits, bitorder="little")[: w * w].reshape(w, w).astype(bool)
            yield PatchRecord(cov, tgt, mask, tile_id, year, col, row)
            index += 1


def read_records(path) -> list[PatchRecord]:
    return list(iter_records(path))


def split_records(records: Iterable[PatchRecord], tile_ids: Iterable[int]) -> list[PatchRecord]:
    keep = set(tile_ids)
    return [r for r in records if r.tile_id in keep]


def record_path(out_dir, fold: int, split: str) -> Path:
    return Path(out_dir) / f"fold{fold}_{split}.cuqr"
