"""Scalar variance calibration and the diagnostics used to judge it."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _check(variance, errors, min_samples: int = 1):
    variance = np.asarray(variance, dtype=np.float64).ravel()
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if variance.shape != errors.shape:
        raise ValueError("variance and errors must have the same length")
    if variance.size < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {variance.size}")
    if np.any(~(variance > 0)):
        raise ValueError("predicted variances must be strictly positive")
    return variance, errors


def scale_objective(s: float, variance, errors) -> float:
    """Gaussian negative log-likelihood (up to constants) of errors under variance ``s * var``."""
    sv = s * np.asarray(variance, dtype=np.float64)
    return float(np.sum(np.log(sv) + np.asarray(errors, dtype=np.float64) ** 2 / sv))


def search_scale(variance, errors, lo: float = 1e-3, hi: float = 1e3, tol: float = 1e-12) -> float:
    """Golden-section minimization of :func:`scale_objective` over ``log s``."""
    variance, errors = _check(variance, errors)
    a, b = math.log(lo), math.log(hi)
    f = lambda t: scale_objective(math.exp(t), variance, errors)  # noqa: E731
    c, d = b - _GOLDEN * (b - a), a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return math.exp(0.5 * (a + b))


def fit_scale(variance, errors, min_samples: int = 100, verify: bool = True) -> float:
    """Variance scale ``s`` making ``s * variance`` match the squared errors.

    The Gaussian NLL in ``s`` has the closed-form minimizer
    ``mean(errors**2 / variance)``; with ``verify`` it is cross-checked by an
    iterative search and a warning is raised if they disagree.
    """
    variance, errors = _check(variance, errors, min_samples)
    s = float(np.mean(errors**2 / variance))
    if not s > 0:
        raise ValueError("all errors are zero; scale is undefined")
    if verify and 1e-3 <= s <= 1e3:
        s_search = search_scale(variance, errors)
        if abs(s_search - s) > 1e-6 * s:
            warnings.warn(f"closed-form scale {s} disagrees with search {s_search}", RuntimeWarning)
    return s


@dataclass
class CalibrationCurve:
    mean_sigma: np.ndarray
    rmse: np.ndarray
    count: np.ndarray

    def __len__(self) -> int:
        return len(self.count)


def calibration_curve(sigma, errors, n_bins: int = 10) -> CalibrationCurve:
    """Equal-count bins by predicted std: (mean std, RMSE of errors, count) per bin."""
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if sigma.size == 0:
        raise ValueError("empty input")
    if sigma.size < n_bins:
        raise ValueError(f"need at least {n_bins} samples for {n_bins} bins")
    order = np.argsort(sigma, kind="stable")
    bins = np.array_split(order, n_bins)
    return CalibrationCurve(
        mean_sigma=np.array([sigma[b].mean() for b in bins]),
        rmse=np.array([np.sqrt(np.mean(errors[b] ** 2)) for b in bins]),
        count=np.array([b.size for b in bins]),
    )


def expected_calibration_error(curve: CalibrationCurve) -> float:
    """Count-weighted mean absolute gap between bin RMSE and bin mean std (meters)."""
    w = curve.count / curve.count.sum()
    return float(np.sum(w * np.abs(curve.rmse - curve.mean_sigma)))


def rmse_recall_curve(sigma, errors, n_points: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """RMSE of the most-confident fraction of samples, for recall 1%..100%."""
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if sigma.size == 0:
        raise ValueError("empty input")
    order = np.argsort(sigma, kind="stable")
    sq = errors[order] ** 2
    recall = np.arange(1, n_points + 1) / n_points
    counts = np.maximum(1, np.ceil(recall * sigma.size - 1e-9).astype(int))
    counts[-1] = sigma.size
    cum = np.cumsum(sq)
    rmse = np.sqrt(cum[counts - 1] / counts)
    # the full-recall point is computed directly so it equals the global RMSE
    rmse[-1] = np.sqrt(np.mean(errors**2))
    return recall, rmse


@dataclass
class CalibrationResult:
    scale: float
    pre: CalibrationCurve
    post: CalibrationCurve
    pre_ece: float
    post_ece: float
    extra: dict = field(default_factory=dict)


def calibrate(variance, errors, n_bins: int = 10, min_samples: int = 100) -> CalibrationResult:
    """Fit the scale on a validation set and report curves before and after."""
    variance, errors = _check(variance, errors, min_samples)
    s = fit_scale(variance, errors, min_samples)
    pre = calibration_curve(np.sqrt(variance), errors, n_bins)
    post = calibration_curve(np.sqrt(s * variance), errors, n_bins)
    return CalibrationResult(s, pre, post, expected_calibration_error(pre), expected_calibration_error(post))


def write_curves(path, result: CalibrationResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "mean_sigma", "rmse", "count", "stage"])
        for stage, curve in (("pre", result.pre), ("post", result.post)):
            for i in range(len(curve)):
                writer.writerow([i, repr(float(curve.mean_sigma[i])), repr(float(curve.rmse[i])), int(curve.count[i]), stage])
