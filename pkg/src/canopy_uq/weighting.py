"""Inverse kernel-density sample weights for the regression target."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import optimize

from .dataset import PatchRecord

WEIGHT_MAGIC = b"CUQW"
_HEADER = struct.Struct("<4sIdd")
_SQRT_2PI = np.sqrt(2.0 * np.pi)
# above this many points the KDE is evaluated from a fine histogram
_EXACT_LIMIT = 50_000
_BINNED_BINS = 16_384


def sample_targets(records: Iterable[PatchRecord], n: int = 10_000_000, seed: int = 0) -> np.ndarray:
    """Uniform random sample of valid target values (with replacement only if needed)."""
    pops = [r.target[r.valid_mask] for r in records]
    pop = np.concatenate(pops).astype(np.float64) if pops else np.empty(0)
    if pop.size == 0:
        raise ValueError("no valid target values to sample")
    rng = np.random.default_rng(seed)
    if pop.size < n:
        return rng.choice(pop, size=n, replace=True)
    return rng.choice(pop, size=n, replace=False)


def silverman_bandwidth(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    sd = values.std()
    q75, q25 = np.percentile(values, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    if not spread > 0:
        spread = 1.0
    return 0.9 * spread * values.size ** (-0.2)


class GaussianKDE:
    """Univariate Gaussian kernel density estimate."""

    def __init__(self, values, h: float | None = None):
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            raise ValueError("KDE needs at least one value")
        if h is None:
            h = silverman_bandwidth(values)
        if not h > 0:
            raise ValueError(f"bandwidth must be positive, got {h}")
        self.h = float(h)
        self.n = values.size
        if values.size <= _EXACT_LIMIT:
            self._centers, self._counts = values, np.ones_like(values)
        else:
            lo, hi = values.min(), values.max()
            if hi == lo:
                self._centers, self._counts = np.array([lo]), np.array([float(values.size)])
            else:
                counts, edges = np.histogram(values, bins=_BINNED_BINS, range=(lo, hi))
                keep = counts > 0
                self._centers = 0.5 * (edges[:-1] + edges[1:])[keep]
                self._counts = counts[keep].astype(np.float64)

    def __call__(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=np.float64))
        out = np.empty(z.shape)
        flat = z.ravel()
        res = out.ravel()
        chunk = max(1, 2_000_000 // max(1, self._centers.size))
        for i in range(0, flat.size, chunk):
            u = (flat[i : i + chunk, None] - self._centers[None, :]) / self.h
            res[i : i + chunk] = (np.exp(-0.5 * u * u) * self._counts).sum(axis=1)
        return res.reshape(z.shape) / (self.n * self.h * _SQRT_2PI)


def fit_kde(values, h: float | None = None) -> GaussianKDE:
    return GaussianKDE(values, h)


@dataclass
class WeightFunction:
    """Piecewise-linear lookup of normalized inverse-density weights on ``[lo, hi]``.

    Heights outside the range are clamped to it.
    """

    table: np.ndarray
    lo: float = 0.0
    hi: float = 40.0

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, len(self.table))

    def __call__(self, z) -> np.ndarray:
        z = np.clip(np.asarray(z, dtype=np.float64), self.lo, self.hi)
        return np.interp(z, self.grid, self.table)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(WEIGHT_MAGIC, len(self.table), self.lo, self.hi))
            fh.write(np.asarray(self.table, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "WeightFunction":
        buf = Path(path).read_bytes()
        if len(buf) < _HEADER.size:
            raise ValueError(f"{path}: truncated weight table")
        magic, n, lo, hi = _HEADER.unpack_from(buf)
        if magic != WEIGHT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if len(buf) != _HEADER.size + 4 * n:
            raise ValueError(f"{path}: expected {n} weights")
        return cls(np.frombuffer(buf, "<f4", n, _HEADER.size).astype(np.float64), lo, hi)


def fit_weights(
    values,
    h: float | None = None,
    clip: tuple[float, float] = (0.1, 10.0),
    bins: int = 1024,
    lo: float = 0.0,
    hi: float = 40.0,
) -> WeightFunction:
    """Fit the inverse-KDE weight lookup on a target sample.

    The density is tabulated on ``bins`` points over ``[lo, hi]``. The table
    is ``clip(1 / (c * density))`` with the scale ``c`` solved so that the
    mean weight over the sample is exactly 1 with the clip bounds in force.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if not clip[0] < 1.0 < clip[1]:
        raise ValueError("clip range must bracket 1")
    kde = fit_kde(values, h)
    grid = np.linspace(lo, hi, bins)
    inv = 1.0 / np.maximum(kde(grid), np.finfo(float).tiny)
    sample = np.clip(values, lo, hi)
    # interpolation is linear in the table, so the sample mean is a dot product
    # with per-node interpolation weights
    idx = np.interp(sample, grid, np.arange(bins, dtype=np.float64))
    i0 = np.minimum(np.floor(idx).astype(np.int64), bins - 2)
    frac = idx - i0
    node_w = np.bincount(i0, 1.0 - frac, bins) + np.bincount(i0 + 1, frac, bins)
    node_w /= sample.size

    def excess(log_c: float) -> float:
        with np.errstate(over="ignore"):
            return float(node_w @ np.clip(inv * np.exp(-log_c), *clip)) - 1.0

    # weight mean falls monotonically from clip[1] to clip[0] as c grows
    a = np.log(inv.min()) - np.log(clip[1]) - 1.0
    b = np.log(inv.max()) - np.log(clip[0]) + 1.0
    log_c = optimize.brentq(excess, a, b, xtol=1e-14, rtol=1e-15, maxiter=500)
    table = np.clip(inv * np.exp(-log_c), *clip)
    return WeightFunction(table, lo, hi)
