"""End-to-end spatial cross-validation run on a synthetic scene."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import calibration
from .dataset import FoldSpec, PatchRecord, TileGrid, extract_patches, make_tiles, spatial_folds, split_records, synth_scene, tile_id_raster
from .ensemble import EnsembleField, predict_map
from .evaluate import EvalReport, SamplePairSet, metrics
from .grid import OnlineStats, RasterGrid, clamp_normalize, raster_stats
from .model import TOY_CONFIG, ModelConfig, ResUNet
from .trainer import TrainConfig, target_normalization, train_model
from .weighting import WeightFunction, fit_weights, sample_targets

log = logging.getLogger(__name__)

# Desk-scale optimizer settings: the full-scale defaults (lr 1e-4, batch 256)
# take far more steps than a few dozen patches provide.
DESK_TRAIN = TrainConfig(lr0=2e-3, epochs=60, batch=8, seed=0)


@dataclass
class PatchOptions:
    size: int = 64
    overlap: float = 0.25
    min_density: float = 0.01


@dataclass
class FoldRun:
    fold: FoldSpec
    stats: OnlineStats
    models: list[ResUNet]
    weights: list[WeightFunction | None]
    histories: list[list[dict]]


def train_fold(
    covariates: RasterGrid,
    target: RasterGrid,
    tiles: TileGrid,
    fold: FoldSpec,
    model_kw: dict,
    train_cfg: TrainConfig,
    weighted: bool,
    patches: PatchOptions = PatchOptions(),
    n_members: int | None = None,
    kde_samples: int = 10_000_000,
) -> FoldRun:
    """Train one ensemble member per sub-fold of ``fold``."""
    ids = tile_id_raster(covariates, tiles)
    train_mask = np.isin(ids, fold.train_tile_ids)
    stats = raster_stats(covariates, mask=train_mask)
    norm = clamp_normalize(covariates, stats)
    records = list(
        extract_patches(norm, target, patches.size, patches.overlap, patches.min_density, tiles=tiles)
    )
    records = split_records(records, fold.train_tile_ids)
    models, wfs, histories = [], [], []
    subs = fold.sub_folds[:n_members] if n_members else fold.sub_folds
    for sub_id, (train_ids, val_ids) in enumerate(subs):
        tr = split_records(records, train_ids)
        va = split_records(records, val_ids)
        wf = None
        if weighted:
            wf = fit_weights(sample_targets(tr, kde_samples, seed=train_cfg.seed + sub_id))
        shift, scale = target_normalization(tr)
        cfg = ModelConfig(in_channels=covariates.channels, target_shift=shift, target_scale=scale, **model_kw)
        member_cfg = replace(train_cfg, seed=train_cfg.seed + 100 * fold.fold_id + sub_id)
        result = train_model(tr, va, cfg, member_cfg, wf)
        log.info(
            "fold %d sub-fold %d: %d train / %d val patches, final val NLL %.4f",
            fold.fold_id, sub_id, len(tr), len(va), result.history[-1]["val_nll"],
        )
        models.append(result.model)
        wfs.append(wf)
        histories.append(result.history)
    return FoldRun(fold, stats, models, wfs, histories)


@dataclass
class SyntheticRun:
    covariates: RasterGrid
    truth: RasterGrid
    sparse: RasterGrid
    tiles: TileGrid
    folds: list[FoldSpec]
    tile_ids: np.ndarray
    height: np.ndarray  # out-of-fold ensemble mean, NaN where not predicted
    field: EnsembleField  # out-of-fold moments, NaN where not predicted
    runs: list[FoldRun] = field(default_factory=list)

    @property
    def test_mask(self) -> np.ndarray:
        return np.isfinite(self.height)

    def pairs(self, mask: np.ndarray | None = None) -> SamplePairSet:
        m = self.test_mask if mask is None else (mask & self.test_mask)
        return SamplePairSet(self.height[m], self.truth.data[:, :, 0][m])

    def report(self) -> EvalReport:
        return metrics(self.pairs())

    def baseline_rmse(self) -> float:
        """RMSE of predicting the mean held-out height everywhere."""
        ref = self.pairs().ref
        return float(np.sqrt(np.mean((ref - ref.mean()) ** 2)))

    def top_decile_mae(self) -> float:
        pairs = self.pairs()
        cut = np.quantile(pairs.ref, 0.9)
        top = pairs.ref >= cut
        return float(np.mean(np.abs(pairs.pred[top] - pairs.ref[top])))


def run_synthetic(
    seed: int = 0,
    size: int = 640,
    outlier_rate: float = 0.05,
    tile_grid: tuple[int, int] = (4, 4),
    k_folds: int = 2,
    n_members: int = 5,
    model_kw: dict | None = None,
    train_cfg: TrainConfig = DESK_TRAIN,
    weighted: bool = True,
    patches: PatchOptions = PatchOptions(),
    kde_samples: int = 10_000_000,
    scene: tuple[RasterGrid, RasterGrid, RasterGrid] | None = None,
) -> SyntheticRun:
    """Synthesize a scene, cross-validate ensembles over tile folds and stitch out-of-fold predictions."""
    model_kw = dict(TOY_CONFIG) if model_kw is None else model_kw
    cov, truth, sparse = scene if scene is not None else synth_scene(seed, size, outlier_rate)
    tiles = make_tiles(cov.bbox, *tile_grid)
    folds = spatial_folds(tiles, k_folds, seed, n_sub=n_members)
    ids = tile_id_raster(cov, tiles)
    shape = (cov.height, cov.width)
    height = np.full(shape, np.nan)
    parts = {name: np.full(shape, np.nan) for name in ("mean", "aleatoric", "epistemic", "total")}
    runs = []
    for fold in folds:
        run = train_fold(cov, sparse, tiles, fold, model_kw, train_cfg, weighted, patches, n_members, kde_samples)
        runs.append(run)
        norm = clamp_normalize(cov, run.stats)
        _, _, ens = predict_map(run.models, norm, patches.size, round(patches.size * (1 - patches.overlap)))
        test = np.isin(ids, fold.test_tile_ids)
        height[test] = ens.mean[test]
        for name in parts:
            parts[name][test] = getattr(ens, name)[test]
    return SyntheticRun(cov, truth, sparse, tiles, list(folds), ids, height, EnsembleField(**parts), runs)


def calibration_split(run: SyntheticRun, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Split held-out tiles in half: (calibration pixel mask, evaluation pixel mask)."""
    test_tiles = sorted({t for f in run.folds for t in f.test_tile_ids})
    rng = np.random.default_rng(seed)
    cal_tiles = rng.permutation(test_tiles)[: len(test_tiles) // 2]
    cal = np.isin(run.tile_ids, cal_tiles) & run.test_mask
    return cal, run.test_mask & ~cal


def calibrate_run(run: SyntheticRun, seed: int = 0) -> dict:
    """Fit the variance scale on sparse targets of half the held-out tiles and
    evaluate against dense truth on the other half."""
    cal, ev = calibration_split(run, seed)
    sparse_ok = run.sparse.valid_mask() & cal
    var_cal = run.field.total[sparse_ok]
    err_cal = run.height[sparse_ok] - run.sparse.data[:, :, 0][sparse_ok]
    result = calibration.calibrate(var_cal, err_cal)
    var_ev = run.field.total[ev]
    err_ev = run.height[ev] - run.truth.data[:, :, 0][ev]
    pre = calibration.calibration_curve(np.sqrt(var_ev), err_ev)
    post = calibration.calibration_curve(np.sqrt(result.scale * var_ev), err_ev)
    recall, rmse = calibration.rmse_recall_curve(np.sqrt(result.scale * var_ev), err_ev)
    return {
        "fit": result,
        "eval_pre_ece": calibration.expected_calibration_error(pre),
        "eval_post_ece": calibration.expected_calibration_error(post),
        "recall": recall,
        "rmse_recall": rmse,
        "eval_errors": err_ev,
        "eval_variance": var_ev,
    }


def records_for(run: SyntheticRun, fold_id: int, patches: PatchOptions = PatchOptions()) -> list[PatchRecord]:
    fold_run = run.runs[fold_id]
    norm = clamp_normalize(run.covariates, fold_run.stats)
    return list(extract_patches(norm, run.sparse, patches.size, patches.overlap, patches.min_density, tiles=run.tiles))
