"""Accuracy metrics, target filters and density-scatter summaries."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .grid import RasterGrid


@dataclass(frozen=True)
class EvalReport:
    r2: float
    rmse: float
    mae: float
    bias: float
    n: int
    lo: float = float("-inf")
    hi: float = float("inf")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SamplePairSet:
    pred: np.ndarray
    ref: np.ndarray
    x: np.ndarray | None = None
    y: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.pred = np.asarray(self.pred, dtype=np.float64).ravel()
        self.ref = np.asarray(self.ref, dtype=np.float64).ravel()
        if self.pred.shape != self.ref.shape:
            raise ValueError("prediction and reference lengths differ")

    def __len__(self) -> int:
        return self.pred.size

    def subset(self, keep: np.ndarray) -> "SamplePairSet":
        return SamplePairSet(
            self.pred[keep],
            self.ref[keep],
            None if self.x is None else self.x[keep],
            None if self.y is None else self.y[keep],
        )


def pairs_from_rasters(pred: RasterGrid, ref: RasterGrid, mask: np.ndarray | None = None) -> SamplePairSet:
    """Co-located valid pixels of two single-band rasters on the same grid."""
    if not pred.same_geometry(ref):
        raise ValueError("prediction and reference rasters must share a grid")
    ok = pred.valid_mask() & ref.valid_mask()
    if mask is not None:
        ok &= mask
    x, y = pred.pixel_centers()
    return SamplePairSet(pred.data[:, :, 0][ok], ref.data[:, :, 0][ok], x[ok], y[ok])


def filter_range(pairs: SamplePairSet, lo: float = 3.0, hi: float = 40.0, both: bool = False) -> SamplePairSet:
    """Keep pairs whose reference lies in ``[lo, hi]`` (and the prediction too if ``both``)."""
    keep = (pairs.ref >= lo) & (pairs.ref <= hi)
    if both:
        keep &= (pairs.pred >= lo) & (pairs.pred <= hi)
    return pairs.subset(keep)


def filter_gedi(values, quality_flag=None, beam_strong=None, lo: float = 0.0, hi: float = 40.0):
    """Boolean keep-mask for GEDI rh98 shots.

    Drops heights outside ``[lo, hi]``, shots whose quality flag is not 1 and
    shots from weak (coverage) beams.
    """
    values = np.asarray(values, dtype=np.float64)
    keep = (values >= lo) & (values <= hi)
    if quality_flag is not None:
        keep &= np.asarray(quality_flag) == 1
    if beam_strong is not None:
        keep &= np.asarray(beam_strong, dtype=bool)
    return keep


def metrics(pairs: SamplePairSet, lo: float = float("-inf"), hi: float = float("inf")) -> EvalReport:
    """R^2, RMSE, MAE and bias (mean of prediction minus reference).

    R^2 is NaN when the reference has zero variance.
    """
    n = len(pairs)
    if n < 2:
        raise ValueError("metrics need at least two pairs")
    d = pairs.pred - pairs.ref
    ss_res = float(np.sum(d**2))
    ss_tot = float(np.sum((pairs.ref - pairs.ref.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return EvalReport(
        r2=r2,
        rmse=math.sqrt(ss_res / n),
        mae=float(np.mean(np.abs(d))),
        bias=float(np.mean(d)),
        n=n,
        lo=lo,
        hi=hi,
    )


@dataclass
class DensityScatter:
    counts: np.ndarray  # (n_ref_bins, n_pred_bins)
    edges: np.ndarray
    slope: float
    intercept: float


def density_scatter(pairs: SamplePairSet, n: int = 40, lo: float = 0.0, hi: float = 40.0) -> DensityScatter:
    """2-D histogram over reference x prediction and the OLS line pred = a * ref + b.

    Values outside ``[lo, hi]`` are counted in the edge cells so the total
    equals the number of pairs.
    """
    if len(pairs) < 2:
        raise ValueError("density scatter needs at least two pairs")
    edges = np.linspace(lo, hi, n + 1)
    r = np.clip(pairs.ref, lo, hi)
    p = np.clip(pairs.pred, lo, hi)
    counts, _, _ = np.histogram2d(r, p, bins=[edges, edges])
    rc = pairs.ref - pairs.ref.mean()
    var = float(np.sum(rc**2))
    slope = float(np.sum(rc * (pairs.pred - pairs.pred.mean())) / var) if var > 0 else float("nan")
    intercept = float(pairs.pred.mean() - slope * pairs.ref.mean())
    return DensityScatter(counts.astype(np.int64), edges, slope, intercept)


def write_report(path, reports: dict[str, EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "r2", "rmse", "mae", "bias", "n", "lo", "hi"])
        for name, rep in reports.items():
            writer.writerow([name, repr(rep.r2), repr(rep.rmse), repr(rep.mae), repr(rep.bias), rep.n, rep.lo, rep.hi])


def write_scatter(path, ds: DensityScatter) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ref_lo", "ref_hi", "pred_lo", "pred_hi", "count"])
        for i in range(ds.counts.shape[0]):
            for j in range(ds.counts.shape[1]):
                if ds.counts[i, j]:
                    writer.writerow([ds.edges[i], ds.edges[i + 1], ds.edges[j], ds.edges[j + 1], int(ds.counts[i, j])])
        writer.writerow(["slope", ds.slope, "intercept", ds.intercept, ""])
