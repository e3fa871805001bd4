"""Raster containers, pixel geometry and streaming per-channel statistics.

Rasters are stored channel-last, row-major, with row 0 being the southern-most
row: the map origin is the lower-left corner of the grid and y grows northward.
The GeoTIFF reader flips rows on ingest so that this holds everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

DEFAULT_NODATA = -9999.0


@dataclass(frozen=True)
class BBox:
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self) -> None:
        if not (self.min_x < self.max_x and self.min_y < self.max_y):
            raise ValueError(f"degenerate bounding box {self}")

    @property
    def width(self) -> float:
        return self.max_x - self.min_x

    @property
    def height(self) -> float:
        return self.max_y - self.min_y

    @property
    def area(self) -> float:
        return self.width * self.height

    def intersection(self, other: "BBox") -> "BBox | None":
        """Overlap with positive area, or None."""
        lo_x = max(self.min_x, other.min_x)
        lo_y = max(self.min_y, other.min_y)
        hi_x = min(self.max_x, other.max_x)
        hi_y = min(self.max_y, other.max_y)
        if lo_x < hi_x and lo_y < hi_y:
            return BBox(lo_x, lo_y, hi_x, hi_y)
        return None

    def contains(self, x, y):
        """Half-open containment [min, max) so adjacent boxes never share a point."""
        return (x >= self.min_x) & (x < self.max_x) & (y >= self.min_y) & (y < self.max_y)


@dataclass
class RasterGrid:
    """A georeferenced multi-channel pixel grid.

    ``data`` has shape ``(height, width, channels)``; ``data[row, col]`` is the
    pixel whose lower-left corner sits at
    ``(origin_x + col * pixel_size, origin_y + row * pixel_size)``.
    """

    data: np.ndarray
    origin_x: float = 0.0
    origin_y: float = 0.0
    pixel_size: float = 30.0
    nodata: float = DEFAULT_NODATA
    crs_tag: str = ""

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError(f"raster data must be 2-D or 3-D, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        self.data = data
        h, w, c = data.shape
        if h <= 0 or w <= 0 or c < 1:
            raise ValueError(f"raster must be non-empty, got shape {data.shape}")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def bbox(self) -> BBox:
        return BBox(
            self.origin_x,
            self.origin_y,
            self.origin_x + self.width * self.pixel_size,
            self.origin_y + self.height * self.pixel_size,
        )

    def same_geometry(self, other: "RasterGrid") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and self.origin_x == other.origin_x
            and self.origin_y == other.origin_y
            and self.pixel_size == other.pixel_size
        )

    def nodata_mask(self) -> np.ndarray:
        """Boolean ``(h, w, c)`` array, True where a sample is nodata."""
        if np.isnan(self.nodata):
            return np.isnan(self.data)
        return (self.data == self.nodata) | ~np.isfinite(self.data)

    def valid_mask(self) -> np.ndarray:
        """``(h, w)`` mask of pixels valid in every channel."""
        return ~self.nodata_mask().any(axis=2)

    def band(self, i: int) -> np.ndarray:
        return self.data[:, :, i]

    def with_data(self, data: np.ndarray, nodata: float | None = None) -> "RasterGrid":
        """Same geometry, new samples."""
        return replace(self, data=data, nodata=self.nodata if nodata is None else nodata)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Map coordinates of pixel centers, each shaped ``(h, w)``."""
        xs = self.origin_x + (np.arange(self.width) + 0.5) * self.pixel_size
        ys = self.origin_y + (np.arange(self.height) + 0.5) * self.pixel_size
        return np.meshgrid(xs, ys)


def pixel_bbox(r: RasterGrid, col: int, row: int) -> BBox:
    if not (0 <= col < r.width and 0 <= row < r.height):
        raise IndexError(f"pixel ({col}, {row}) outside {r.width}x{r.height} raster")
    x0 = r.origin_x + col * r.pixel_size
    y0 = r.origin_y + row * r.pixel_size
    return BBox(x0, y0, x0 + r.pixel_size, y0 + r.pixel_size)


@dataclass(frozen=True)
class OnlineStats:
    """Per-channel running count, mean and sum of squared deviations.

    Partial results merge with the pairwise rule of Chan, Golub and LeVeque,
    so statistics can be accumulated over shards in any grouping.
    """

    count: np.ndarray
    mean: np.ndarray
    m2: np.ndarray = field(repr=False)

    @classmethod
    def empty(cls, channels: int) -> "OnlineStats":
        z = np.zeros(channels, dtype=np.float64)
        return cls(z.copy(), z.copy(), z.copy())

    @property
    def channels(self) -> int:
        return len(self.count)

    @property
    def variance(self) -> np.ndarray:
        """Population variance (m2 / count)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 0, self.m2 / np.maximum(self.count, 1), np.nan)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def merge(self, other: "OnlineStats") -> "OnlineStats":
        if other.channels != self.channels:
            raise ValueError("channel count mismatch in stats merge")
        n_a, n_b = self.count, other.count
        n = n_a + n_b
        safe_n = np.where(n > 0, n, 1)
        delta = other.mean - self.mean
        mean = np.where(n > 0, self.mean + delta * n_b / safe_n, 0.0)
        m2 = self.m2 + other.m2 + delta**2 * n_a * n_b / safe_n
        return OnlineStats(n, mean, m2)

    @classmethod
    def of(cls, batch: Sequence[Iterable[float]] | np.ndarray) -> "OnlineStats":
        """Two-pass statistics of one batch.

        ``batch`` is either an ``(n, c)`` array or a sequence of ``c`` per-channel
        value sequences (which may differ in length).
        """
        if isinstance(batch, np.ndarray) and batch.ndim == 2:
            columns = [batch[:, i] for i in range(batch.shape[1])]
        elif isinstance(batch, np.ndarray) and batch.ndim == 1:
            columns = [batch]
        else:
            columns = [np.asarray(col, dtype=np.float64).ravel() for col in batch]
        count = np.array([len(c) for c in columns], dtype=np.float64)
        mean = np.array([np.mean(c, dtype=np.float64) if len(c) else 0.0 for c in columns])
        m2 = np.array(
            [np.sum((np.asarray(c, dtype=np.float64) - m) ** 2) if len(c) else 0.0 for c, m in zip(columns, mean)]
        )
        return cls(count, mean, m2)

    def to_dict(self) -> dict:
        return {"count": self.count.tolist(), "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "OnlineStats":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("count", "mean", "m2")))


def stats_update(stats: OnlineStats, batch) -> OnlineStats:
    """Fold a batch of (nodata-free) values into running statistics."""
    return stats.merge(OnlineStats.of(batch))


def raster_stats(r: RasterGrid, stats: OnlineStats | None = None, mask: np.ndarray | None = None) -> OnlineStats:
    """Accumulate per-channel statistics of the valid samples of ``r``.

    ``mask`` optionally restricts the pixels considered (True = include).
    """
    if stats is None:
        stats = OnlineStats.empty(r.channels)
    bad = r.nodata_mask()
    columns = []
    for ch in range(r.channels):
        keep = ~bad[:, :, ch]
        if mask is not None:
            keep &= mask
        columns.append(r.data[:, :, ch][keep].astype(np.float64))
    return stats_update(stats, columns)


def _check_stats(r: RasterGrid, stats: OnlineStats) -> np.ndarray:
    if stats.channels != r.channels:
        raise ValueError(f"stats have {stats.channels} channels, raster has {r.channels}")
    if np.any(stats.count < 2):
        raise ValueError("normalization statistics need at least two samples per channel")
    std = stats.std
    for ch, s in enumerate(std):
        if not s > 0:
            raise ValueError(f"channel {ch} has zero variance; cannot standardize")
    return std


def clamp(r: RasterGrid, stats: OnlineStats) -> RasterGrid:
    """Clip each channel to mean +/- 3 std, leaving nodata alone."""
    std = _check_stats(r, stats)
    out = np.clip(r.data.astype(np.float64), stats.mean - 3.0 * std, stats.mean + 3.0 * std)
    out = np.where(r.nodata_mask(), r.data, out)
    return r.with_data(out)


def clamp_normalize(r: RasterGrid, stats: OnlineStats) -> RasterGrid:
    """Clip each channel to mean +/- 3 std, then standardize.

    Nodata samples pass through untouched.
    """
    std = _check_stats(r, stats)
    x = clamp(r, stats).data
    out = (x - stats.mean) / std
    out = np.where(r.nodata_mask(), r.nodata, out).astype(r.data.dtype)
    return r.with_data(out)
