"""Seasonal median compositing with per-pixel fallback to earlier years."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .grid import RasterGrid

SEASONS = ("winter", "summer", "fall")
SENSORS = ("optical", "sar")

# Landsat Collection 2 QA_PIXEL bits: dilated cloud, cirrus, cloud, cloud shadow
LANDSAT_NOISE_BITS = (1, 2, 3, 4)
LANDSAT_SNOW_BIT = 5

# (qa values, season) -> bool mask of usable pixels
Predicate = Callable[[np.ndarray, str], np.ndarray]


def landsat_qa_predicate(qa: np.ndarray, season: str) -> np.ndarray:
    """Usable unless a noise bit is set; snow also disqualifies outside winter."""
    bits = list(LANDSAT_NOISE_BITS)
    if season != "winter":
        bits.append(LANDSAT_SNOW_BIT)
    flags = np.zeros(qa.shape, dtype=np.int64)
    qa = qa.astype(np.int64)
    for bit in bits:
        flags |= qa & (1 << bit)
    return flags == 0


@dataclass
class Observation:
    image: RasterGrid
    year: int
    season: str = "summer"
    sensor: str = "optical"


@dataclass
class ObservationStack:
    observations: list[Observation] = field(default_factory=list)

    def __post_init__(self) -> None:
        obs = self.observations
        for o in obs:
            if o.season not in SEASONS:
                raise ValueError(f"unknown season {o.season!r}")
        for o in obs[1:]:
            if not o.image.same_geometry(obs[0].image):
                raise ValueError("all images in a stack must share grid geometry")

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)


@dataclass(frozen=True)
class CompositeParams:
    target_year: int
    season: str = "summer"
    sensor: str = "optical"
    min_obs: int = 1
    lookback: int = 2
    qa_channel: int | None = None

    def __post_init__(self) -> None:
        if self.lookback < 0:
            raise ValueError("lookback must be non-negative")
        if self.min_obs < 1:
            raise ValueError("min_obs must be at least 1")
        if self.season not in SEASONS:
            raise ValueError(f"season must be one of {SEASONS}")
        if self.sensor not in SENSORS:
            raise ValueError(f"sensor must be one of {SENSORS}")


def _data_bands(img: RasterGrid, qa_channel: int | None) -> list[int]:
    return [i for i in range(img.channels) if i != qa_channel]


def validity_mask(
    img: RasterGrid,
    sensor: str,
    season: str,
    predicate: Predicate | None = None,
    qa_channel: int | None = None,
) -> np.ndarray:
    """``(h, w)`` mask of usable pixels.

    A pixel is usable when no data band is nodata and, for optical imagery with
    a QA channel, ``predicate(qa, season)`` holds (Landsat QA bits by default).
    SAR images and images without QA use only the nodata test unless an
    explicit predicate is supplied.
    """
    bands = _data_bands(img, qa_channel)
    mask = ~img.nodata_mask()[:, :, bands].any(axis=2)
    if qa_channel is not None:
        qa = img.data[:, :, qa_channel]
        if predicate is None and sensor == "optical":
            predicate = landsat_qa_predicate
        if predicate is not None:
            mask &= predicate(qa, season)
    elif predicate is not None:
        mask &= predicate(img.data[:, :, bands[0]], season)
    return mask


def pixel_counter(masks: Sequence[np.ndarray], shape: tuple[int, int] | None = None) -> np.ndarray:
    """Per-pixel number of accepted observations."""
    if not masks:
        if shape is None:
            raise ValueError("shape is required for an empty collection")
        return np.zeros(shape, dtype=np.int64)
    return np.sum(np.stack(masks), axis=0, dtype=np.int64)


def masked_median(values: np.ndarray, accepted: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Median over axis 0 of ``values`` restricted to ``accepted``.

    Even counts average the two middle values. Returns ``(median, count)``;
    the median is undefined (0) where the count is 0.
    """
    v = np.where(accepted[..., None] if values.ndim > accepted.ndim else accepted, values, np.inf)
    v = np.sort(v, axis=0)
    n = accepted.sum(axis=0)
    if values.ndim > accepted.ndim:
        n_b = np.broadcast_to(n[..., None], v.shape[1:])
    else:
        n_b = n
    lo = np.maximum((n_b - 1) // 2, 0)
    hi = np.maximum(n_b // 2, 0)
    a = np.take_along_axis(v, lo[None], axis=0)[0]
    b = np.take_along_axis(v, hi[None], axis=0)[0]
    with np.errstate(invalid="ignore"):
        med = np.where(n_b > 0, (a + b) / 2.0, 0.0)
    return med, n


def composite(
    source: Callable[[int], ObservationStack | None] | Mapping[int, ObservationStack],
    params: CompositeParams,
    predicate: Predicate | None = None,
    nodata: float | None = None,
    template: RasterGrid | None = None,
) -> RasterGrid:
    """Median composite for ``params.target_year`` with per-pixel year fallback.

    Years are visited from the target year backwards (``lookback`` extra
    years). Each year's valid observations are added only at pixels that had
    fewer than ``min_obs`` accepted observations before that year; the result
    is the per-pixel, per-band median of everything accepted. Pixels that never
    receive an observation are nodata. ``template`` supplies the output grid
    when no year has any image at all.
    """
    get = source.get if isinstance(source, Mapping) else source
    accepted_values: list[np.ndarray] = []
    accepted_masks: list[np.ndarray] = []
    counter = None
    found = False
    for k in range(params.lookback + 1):
        year = params.target_year - k
        stack = get(year)
        if not stack:
            continue
        obs = [o for o in stack if o.season == params.season and o.sensor == params.sensor]
        if not obs:
            continue
        if not found:
            if template is None:
                template = obs[0].image
            counter = np.zeros((template.height, template.width), dtype=np.int64)
            found = True
        open_pixels = counter < params.min_obs
        year_masks = []
        for o in obs:
            if not o.image.same_geometry(template):
                raise ValueError(f"image from {year} does not match the composite grid")
            m = validity_mask(o.image, params.sensor, params.season, predicate, params.qa_channel) & open_pixels
            bands = _data_bands(o.image, params.qa_channel)
            accepted_values.append(o.image.data[:, :, bands].astype(np.float64))
            accepted_masks.append(m)
            year_masks.append(m)
        counter = counter + pixel_counter(year_masks)
    if template is None:
        raise ValueError("no observations found for any year in the lookback window")
    out_nodata = template.nodata if nodata is None else nodata
    if not found:
        n_bands = len(_data_bands(template, params.qa_channel))
        empty = np.full((template.height, template.width, n_bands), out_nodata, dtype=np.float64)
        return template.with_data(empty, nodata=out_nodata)
    med, n = masked_median(np.stack(accepted_values), np.stack(accepted_masks))
    med = np.where((n > 0)[..., None], med, out_nodata)
    return template.with_data(med, nodata=out_nodata)
