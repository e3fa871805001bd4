"""Mixture-of-Laplace ensemble moments and tiled full-map inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .grid import RasterGrid
from .model import ResUNet, to_tensor


@dataclass
class EnsembleField:
    mean: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    total: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.total)


def _weights(n_models: int, pis) -> np.ndarray:
    if pis is None:
        return np.full(n_models, 1.0 / n_models)
    pis = np.asarray(pis, dtype=np.float64)
    if pis.shape != (n_models,):
        raise ValueError(f"got {pis.size} mixing weights for {n_models} models")
    if np.any(pis < 0):
        raise ValueError("mixing weights must be non-negative")
    if abs(pis.sum() - 1.0) > 1e-9:
        raise ValueError(f"mixing weights sum to {pis.sum()}, not 1")
    return pis


def mixture_mean(mus, pis=None) -> np.ndarray:
    """Mixture mean; ``mus`` is stacked over members on axis 0."""
    mus = np.asarray(mus, dtype=np.float64)
    w = _weights(mus.shape[0], pis)
    return np.tensordot(w, mus, axes=1)


def mixture_variance(mus, bs, pis=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(aleatoric, epistemic, total) variance of a Laplace mixture.

    Each member contributes variance ``2 b^2``; the epistemic part is the
    weighted spread of member means.
    """
    mus = np.asarray(mus, dtype=np.float64)
    bs = np.asarray(bs, dtype=np.float64)
    if mus.shape != bs.shape:
        raise ValueError("mus and bs must have the same shape")
    if np.any(bs <= 0):
        raise ValueError("Laplace scales must be positive")
    w = _weights(mus.shape[0], pis)
    aleatoric = np.tensordot(w, 2.0 * bs**2, axes=1)
    mean = np.tensordot(w, mus, axes=1)
    epistemic = np.tensordot(w, mus**2, axes=1) - mean**2
    # cancellation can leave tiny negatives when members agree
    epistemic = np.maximum(epistemic, 0.0)
    return aleatoric, epistemic, aleatoric + epistemic


def aggregate(mus, bs, pis=None) -> EnsembleField:
    aleatoric, epistemic, total = mixture_variance(mus, bs, pis)
    return EnsembleField(mixture_mean(mus, pis), aleatoric, epistemic, total)


def window_starts(length: int, window: int, stride: int) -> list[int]:
    """Window offsets covering ``[0, length)``, the last one flush with the edge."""
    if length <= window:
        return [0]
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


def _taper_1d(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * (np.arange(n) + 0.5) / n)


def taper(rows: int, cols: int | None = None) -> np.ndarray:
    """Separable raised-cosine weight, largest at the window center, never zero."""
    return np.outer(_taper_1d(rows), _taper_1d(rows if cols is None else cols)).astype(np.float32)


def predict_member(
    model: ResUNet, x: np.ndarray, window: int = 64, stride: int = 48, batch: int = 16
) -> tuple[np.ndarray, np.ndarray]:
    """Blend one model's (mu, b) over overlapping windows of an ``(h, w, c)`` array."""
    h, w, _ = x.shape
    wy, wx = min(window, h), min(window, w)
    origins = sorted((r, c) for r in window_starts(h, wy, stride) for c in window_starts(w, wx, stride))
    weight = taper(wy, wx)
    weight64 = weight.astype(np.float64)
    acc_mu = np.zeros((h, w))
    acc_b = np.zeros((h, w))
    acc_w = np.zeros((h, w))
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        for i in range(0, len(origins), batch):
            chunk = origins[i : i + batch]
            xs = np.stack([x[r : r + wy, c : c + wx] for r, c in chunk])
            out = model(to_tensor(xs, dtype))
            mu = out.mu.numpy().astype(np.float32)
            b = out.b.numpy().astype(np.float32)
            for k, (r, c) in enumerate(chunk):
                acc_mu[r : r + wy, c : c + wx] += weight64 * mu[k]
                acc_b[r : r + wy, c : c + wx] += weight64 * b[k]
                acc_w[r : r + wy, c : c + wx] += weight
    return acc_mu / acc_w, acc_b / acc_w


def predict_map(
    models: Sequence[ResUNet], covariates: RasterGrid, window: int = 64, stride: int = 48
) -> tuple[RasterGrid, RasterGrid, EnsembleField]:
    """Ensemble height and uncertainty over a normalized covariate raster.

    Returns the height raster, a 3-band uncertainty raster of standard
    deviations in meters (total, aleatoric, epistemic) and the full
    per-pixel field with variances.
    Pixels with nodata in any covariate are nodata in both outputs.
    """
    if not models:
        raise ValueError("need at least one model")
    for m in models:
        if m.cfg.in_channels != covariates.channels:
            raise ValueError(f"model expects {m.cfg.in_channels} channels, covariates have {covariates.channels}")
    invalid = ~covariates.valid_mask()
    x = np.where(invalid[:, :, None], 0.0, covariates.data).astype(np.float32)
    members = [predict_member(m, x, window, stride) for m in models]
    field = aggregate([mu for mu, _ in members], [b for _, b in members])
    nodata = covariates.nodata
    height = np.where(invalid, nodata, field.mean).astype(np.float32)
    unc = np.sqrt(np.stack([field.total, field.aleatoric, field.epistemic], axis=-1))
    unc = np.where(invalid[:, :, None], nodata, unc).astype(np.float32)
    return covariates.with_data(height), covariates.with_data(unc), field
