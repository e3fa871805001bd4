"""Command-line interface: ``canopy-uq <subcommand> [options]``.

Every subcommand accepts ``--config FILE``. The file is an INI-style text
file; keys in the section named after the subcommand (``[train]``,
``[build-dataset]``, ...) become defaults for the matching flags, and flags
given on the command line win. Exit codes: 0 success, 2 bad arguments,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import calibrate, write_curves
from .dataset import (
    extract_patches,
    make_tiles,
    read_records,
    record_path,
    spatial_folds,
    split_records,
    synth_scene,
    tile_id_raster,
    write_records,
)
from .ensemble import predict_map
from .evaluate import density_scatter, filter_range, metrics, pairs_from_rasters, write_report, write_scatter
from .grid import BBox, OnlineStats, RasterGrid, clamp_normalize, raster_stats
from .harmonize import harmonize
from .model import TOY_CONFIG, ModelConfig, load_checkpoint, save_checkpoint
from .raster_io import read_raster, write_raster
from .sica import CompositeParams, Observation, ObservationStack, composite
from .pipeline import DESK_TRAIN
from .trainer import TrainConfig, config_dict, target_normalization, train_model, write_history
from .weighting import WeightFunction, fit_weights, sample_targets

log = logging.getLogger("canopy_uq")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# small file helpers


def read_manifest(path) -> list[tuple[Path, list[str]]]:
    """Non-blank, non-comment lines as (path, extra fields); relative paths
    resolve against the manifest's directory."""
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        p = Path(parts[0])
        out.append((p if p.is_absolute() else path.parent / p, parts[1:]))
    return out


def load_covariates(manifest) -> RasterGrid:
    """Stack the bands of every raster listed in ``manifest`` along channels."""
    rasters = [read_raster(p) for p, _ in read_manifest(manifest)]
    if not rasters:
        raise ValueError(f"{manifest}: no rasters listed")
    first = rasters[0]
    for r in rasters[1:]:
        if not r.same_geometry(first):
            raise ValueError(f"{manifest}: rasters are not co-registered")
    data = np.concatenate(
        [np.where(r.nodata_mask(), first.nodata, r.data).astype(np.float32) for r in rasters], axis=2
    )
    return first.with_data(data)


def read_kv(path, section: str | None = None) -> dict[str, str]:
    """``key = value`` lines, optionally under section headers."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser()
    if not text.lstrip().startswith("["):
        text = "[main]\n" + text
    cp.read_string(text)
    if section and cp.has_section(section):
        return dict(cp[section])
    if len(cp.sections()) == 1:
        return dict(cp[cp.sections()[0]])
    raise ValueError(f"{path}: expected a single section or a [{section}] section")


def _coerce(cls, values: dict[str, str], **base):
    kinds = {f.name: f.type for f in fields(cls)}
    out = dict(base)
    for key, raw in values.items():
        key = key.replace("-", "_")
        if key not in kinds:
            raise ValueError(f"unknown {cls.__name__} key {key!r}")
        kind = kinds[key] if isinstance(kinds[key], str) else kinds[key].__name__
        if kind == "int":
            out[key] = int(raw)
        elif kind == "float":
            out[key] = float(raw)
        else:
            out[key] = raw
    return cls(**out)


def _pair(text: str, sep: str, kind=float):
    parts = text.lower().split(sep)
    if len(parts) != 2:
        raise UsageError(f"expected two values separated by {sep!r}, got {text!r}")
    return kind(parts[0]), kind(parts[1])


def _folds_file(records_dir) -> dict:
    return json.loads((Path(records_dir) / "folds.json").read_text())


def _sub_fold(records_dir, fold: int, sub: int) -> tuple[list[int], list[int]]:
    meta = _folds_file(records_dir)
    folds = {f["fold_id"]: f for f in meta["folds"]}
    if fold not in folds:
        raise ValueError(f"fold {fold} not in {records_dir}/folds.json")
    subs = folds[fold]["sub_folds"]
    if not 0 <= sub < len(subs):
        raise ValueError(f"sub-fold {sub} out of range (fold {fold} has {len(subs)})")
    return subs[sub][0], subs[sub][1]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    cov, truth, sparse = synth_scene(a.seed, a.size, a.outlier_rate)
    write_raster(out / "covariates.tif", cov)
    write_raster(out / "truth.tif", truth)
    write_raster(out / "sparse.tif", sparse)
    (out / "covariates.txt").write_text("covariates.tif\n")
    log.info("wrote %dx%d synthetic scene to %s", cov.height, cov.width, out)
    return EXIT_OK


def cmd_composite(a) -> int:
    by_year: dict[int, list[Observation]] = {}
    for path, extra in read_manifest(a.manifest):
        if not extra:
            raise ValueError(f"{a.manifest}: line for {path} is missing the year")
        year = int(extra[0])
        season = extra[1] if len(extra) > 1 else a.season
        sensor = extra[2] if len(extra) > 2 else a.sensor
        by_year.setdefault(year, []).append(Observation(read_raster(path), year, season, sensor))
    stacks = {y: ObservationStack(obs) for y, obs in by_year.items()}
    params = CompositeParams(a.year, a.season, a.sensor, a.min_obs, a.lookback, a.qa_channel)
    result = composite(stacks, params)
    write_raster(a.out, result)
    filled = result.valid_mask().mean()
    log.info("composite %d %s/%s: %.1f%% of pixels filled", a.year, a.season, a.sensor, 100 * filled)
    return EXIT_OK


def cmd_build_dataset(a) -> int:
    cov = load_covariates(a.covariates)
    target = read_raster(a.target)
    if not target.same_geometry(cov):
        raise ValueError("target raster does not match the covariate grid")
    rows, cols = _pair(a.tiles, "x", int)
    tiles = make_tiles(cov.bbox, rows, cols)
    folds = spatial_folds(tiles, a.folds, a.seed, n_sub=a.subfolds)
    ids = tile_id_raster(cov, tiles)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "extent": [cov.bbox.min_x, cov.bbox.min_y, cov.bbox.max_x, cov.bbox.max_y],
        "tiles": [rows, cols],
        "seed": a.seed,
        "patch_size": a.patch_size,
        "folds": [],
    }
    for fold in folds:
        stats = raster_stats(cov, mask=np.isin(ids, fold.train_tile_ids))
        norm = clamp_normalize(cov, stats)
        recs = list(extract_patches(norm, target, a.patch_size, a.overlap, a.min_density, tiles=tiles))
        n_tr = write_records(record_path(out, fold.fold_id, "train"), split_records(recs, fold.train_tile_ids), a.patch_size, cov.channels)
        n_te = write_records(record_path(out, fold.fold_id, "test"), split_records(recs, fold.test_tile_ids), a.patch_size, cov.channels)
        (out / f"fold{fold.fold_id}_stats.json").write_text(json.dumps(stats.to_dict()))
        meta["folds"].append(
            {
                "fold_id": fold.fold_id,
                "test_tile_ids": list(fold.test_tile_ids),
                "train_tile_ids": list(fold.train_tile_ids),
                "sub_folds": [[list(t), list(v)] for t, v in fold.sub_folds],
            }
        )
        log.info("fold %d: %d train / %d test patches", fold.fold_id, n_tr, n_te)
    (out / "folds.json").write_text(json.dumps(meta, indent=1))
    return EXIT_OK


def _records_for_weights(a):
    if a.records:
        return read_records(a.records)
    if a.records_dir is None or a.fold is None:
        raise UsageError("give --records, or --records-dir with --fold (and optionally --subfold)")
    recs = read_records(record_path(a.records_dir, a.fold, "train"))
    if a.subfold is not None:
        train_ids, _ = _sub_fold(a.records_dir, a.fold, a.subfold)
        recs = split_records(recs, train_ids)
    return recs


def cmd_fit_weights(a) -> int:
    recs = _records_for_weights(a)
    h = None if str(a.bandwidth).lower() == "auto" else float(a.bandwidth)
    clip = _pair(a.clip, ",")
    wf = fit_weights(sample_targets(recs, a.samples, a.seed), h=h, clip=clip)
    wf.save(a.out)
    log.info("weights in [%.3f, %.3f] written to %s", wf.table.min(), wf.table.max(), a.out)
    return EXIT_OK


def cmd_train(a) -> int:
    train_ids, val_ids = _sub_fold(a.records_dir, a.fold, a.subfold)
    recs = read_records(record_path(a.records_dir, a.fold, "train"))
    tr, va = split_records(recs, train_ids), split_records(recs, val_ids)
    if not tr:
        raise ValueError(f"fold {a.fold} sub-fold {a.subfold} has no training patches")
    model_kv = read_kv(a.model_config, "model") if a.model_config else {k: str(v) for k, v in TOY_CONFIG.items()}
    shift, scale = target_normalization(tr)
    base = {"in_channels": tr[0].covariates.shape[-1], "target_shift": shift, "target_scale": scale}
    model_cfg = _coerce(ModelConfig, model_kv, **base)
    train_cfg = _coerce(TrainConfig, read_kv(a.train_config, "train")) if a.train_config else TrainConfig()
    if a.seed is not None:
        train_cfg = replace(train_cfg, seed=a.seed)
    wf = WeightFunction.load(a.weights) if a.weights else None
    result = train_model(tr, va, model_cfg, train_cfg, wf)
    save_checkpoint(a.out, result.model)
    if a.log:
        write_history(a.log, result.history)
    last = result.history[-1]
    log.info("trained %d epochs: train NLL %.4f, val NLL %.4f", last["epoch"], last["train_nll"], last["val_nll"])
    return EXIT_OK


def cmd_infer(a) -> int:
    cov = load_covariates(a.covariates)
    stats = OnlineStats.from_dict(json.loads(Path(a.stats).read_text()))
    models = [load_checkpoint(p) for p in a.checkpoints]
    height, unc, _ = predict_map(models, clamp_normalize(cov, stats), a.window, a.stride)
    write_raster(a.out_height, height)
    write_raster(a.out_uncertainty, unc)
    return EXIT_OK


def cmd_calibrate(a) -> int:
    pred, unc, ref = read_raster(a.pred), read_raster(a.uncertainty), read_raster(a.reference)
    if not (pred.same_geometry(unc) and pred.same_geometry(ref)):
        raise ValueError("prediction, uncertainty and reference must share a grid")
    u = unc.data[:, :, a.band].astype(np.float64)
    ok = pred.valid_mask() & ref.valid_mask() & ~unc.nodata_mask()[:, :, a.band]
    var = u[ok] ** 2 if a.uncertainty_kind == "std" else u[ok]
    err = pred.data[:, :, 0][ok].astype(np.float64) - ref.data[:, :, 0][ok]
    result = calibrate(var, err, a.bins, a.min_samples)
    Path(a.out_scale).write_text(f"{result.scale!r}\n")
    if a.out_curves:
        write_curves(a.out_curves, result)
    print(f"scale {result.scale:.6g}  ECE {result.pre_ece:.4f} -> {result.post_ece:.4f} m  (n={var.size})")
    return EXIT_OK


def cmd_harmonize(a) -> int:
    coarse = read_raster(a.coarse_geometry)
    tiles = []
    for path, extra in read_manifest(a.hires_manifest):
        r = read_raster(path)
        if extra:
            if len(extra) != 4:
                raise ValueError(f"{a.hires_manifest}: expected 'path [min_x min_y max_x max_y]'")
            box = BBox(*map(float, extra))
            if box != r.bbox:
                raise ValueError(f"{path}: manifest bbox {box} does not match raster extent {r.bbox}")
        tiles.append(r)
    out = harmonize(coarse, tiles, a.percentile)
    write_raster(a.out, out.with_data(out.data.astype(np.float32)))
    return EXIT_OK


def cmd_evaluate(a) -> int:
    pairs = pairs_from_rasters(read_raster(a.pred), read_raster(a.reference))
    kept = filter_range(pairs, a.lo, a.hi, a.both)
    reports = {"all": metrics(pairs), f"ref_{a.lo:g}_{a.hi:g}": metrics(kept, a.lo, a.hi)}
    for name, r in reports.items():
        print(f"{name}: R2 {r.r2:.4f}  RMSE {r.rmse:.3f} m  MAE {r.mae:.3f} m  bias {r.bias:+.3f} m  n={r.n}")
    if a.out_report:
        write_report(a.out_report, reports)
    if a.out_scatter:
        write_scatter(a.out_scatter, density_scatter(kept, a.bins))
    return EXIT_OK


# ---------------------------------------------------------------------------
# pipeline


def _ns(**kw) -> argparse.Namespace:
    return argparse.Namespace(**kw)


def cmd_pipeline(a) -> int:
    """Synthetic end-to-end chain through every subcommand, via files on disk."""
    out = Path(a.out)
    scene = out / "scene"
    cmd_synth(_ns(seed=a.seed, size=a.size, outlier_rate=a.outlier_rate, out=scene))
    cov = read_raster(scene / "covariates.tif")

    # three yearly acquisitions with cloud gaps; the oldest one is clear
    rng = np.random.default_rng(a.seed)
    obs_dir = out / "observations"
    obs_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, year in enumerate((a.year - 2, a.year - 1, a.year)):
        cloud = rng.random((cov.height, cov.width)) < (0.0 if k == 0 else 0.3)
        img = cov.with_data(np.where(cloud[:, :, None], cov.nodata, cov.data).astype(np.float32))
        write_raster(obs_dir / f"obs_{year}.tif", img)
        lines.append(f"obs_{year}.tif {year} summer optical")
    (obs_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    cmd_composite(_ns(manifest=obs_dir / "manifest.txt", year=a.year, season="summer", sensor="optical",
                      min_obs=1, lookback=2, qa_channel=None, out=out / "composite.tif"))
    (out / "covariates.txt").write_text("composite.tif\n")

    records = out / "records"
    cmd_build_dataset(_ns(covariates=out / "covariates.txt", target=scene / "sparse.tif", tiles=a.tiles,
                          folds=a.folds, subfolds=a.members, patch_size=a.patch_size, overlap=0.25,
                          min_density=0.01, seed=a.seed, out=records))
    meta = _folds_file(records)
    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    train_config = a.train_config
    if train_config is None:
        # the full-scale defaults take only a handful of steps on a synthetic scene
        train_config = models_dir / "train.cfg"
        train_config.write_text("[train]\n" + "".join(f"{k} = {v}\n" for k, v in config_dict(DESK_TRAIN).items()))
    ids = tile_id_raster(cov, make_tiles(BBox(*meta["extent"]), *meta["tiles"]))
    height = np.full((cov.height, cov.width), cov.nodata, dtype=np.float32)
    unc = np.full((cov.height, cov.width, 3), cov.nodata, dtype=np.float32)
    for fold in meta["folds"]:
        f = fold["fold_id"]
        ckpts = []
        for s in range(len(fold["sub_folds"])):
            wpath = None
            if a.weighted:
                wpath = models_dir / f"fold{f}_sub{s}.cuqw"
                cmd_fit_weights(_ns(records=None, records_dir=records, fold=f, subfold=s, samples=a.kde_samples,
                                    bandwidth="auto", clip="0.1,10", seed=a.seed + s, out=wpath))
            ckpt = models_dir / f"fold{f}_sub{s}.cuqm"
            cmd_train(_ns(records_dir=records, fold=f, subfold=s, model_config=a.model_config,
                          train_config=train_config, weights=wpath, out=ckpt,
                          log=models_dir / f"fold{f}_sub{s}.csv", seed=a.seed + 100 * f + s))
            ckpts.append(ckpt)
        h_path, u_path = out / f"fold{f}_height.tif", out / f"fold{f}_uncertainty.tif"
        cmd_infer(_ns(checkpoints=ckpts, covariates=out / "covariates.txt", stats=records / f"fold{f}_stats.json",
                      out_height=h_path, out_uncertainty=u_path, window=a.patch_size,
                      stride=round(0.75 * a.patch_size)))
        test = np.isin(ids, fold["test_tile_ids"])
        height[test] = read_raster(h_path).data[:, :, 0][test]
        unc[test] = read_raster(u_path).data[test]
    write_raster(out / "height.tif", cov.with_data(height))
    write_raster(out / "uncertainty.tif", cov.with_data(unc))

    cmd_calibrate(_ns(pred=out / "height.tif", uncertainty=out / "uncertainty.tif", reference=scene / "sparse.tif",
                      band=0, uncertainty_kind="std", bins=10, min_samples=100, out_scale=out / "scale.txt",
                      out_curves=out / "calibration.csv"))

    # dense reference at a finer resolution, split into four tiles
    truth = read_raster(scene / "truth.tif")
    fine = np.kron(truth.data[:, :, 0], np.ones((a.hires_factor, a.hires_factor), np.float32))
    px = truth.pixel_size / a.hires_factor
    hires_dir = out / "hires"
    hires_dir.mkdir(exist_ok=True)
    half_r, half_c = fine.shape[0] // 2, fine.shape[1] // 2
    lines = []
    for i, (r0, r1) in enumerate(((0, half_r), (half_r, fine.shape[0]))):
        for j, (c0, c1) in enumerate(((0, half_c), (half_c, fine.shape[1]))):
            t = RasterGrid(fine[r0:r1, c0:c1], truth.origin_x + c0 * px, truth.origin_y + r0 * px, px, truth.nodata)
            write_raster(hires_dir / f"hires_{i}{j}.tif", t)
            b = t.bbox
            lines.append(f"hires_{i}{j}.tif {b.min_x!r} {b.min_y!r} {b.max_x!r} {b.max_y!r}")
    (hires_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    cmd_harmonize(_ns(coarse_geometry=out / "height.tif", hires_manifest=hires_dir / "manifest.txt",
                      percentile=98.0, out=out / "reference.tif"))
    cmd_evaluate(_ns(pred=out / "height.tif", reference=out / "reference.tif", lo=3.0, hi=40.0, both=False,
                     out_report=out / "report.csv", out_scatter=out / "scatter.csv", bins=40))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="canopy-uq", description="Canopy height regression with ensemble uncertainty.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="INI file; section [%s] supplies defaults" % name)
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "write a synthetic scene (covariates, dense truth, sparse tracks)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=640)
    sp.add_argument("--outlier-rate", type=float, default=0.05)
    sp.add_argument("--out", required=True)

    sp = add("composite", cmd_composite, "seasonal median composite with year fallback")
    sp.add_argument("--manifest", required=True, help="lines: path year [season [sensor]]")
    sp.add_argument("--year", type=int, required=True)
    sp.add_argument("--season", choices=("winter", "summer", "fall"), default="summer")
    sp.add_argument("--sensor", choices=("optical", "sar"), default="optical")
    sp.add_argument("--min-obs", type=int, default=1)
    sp.add_argument("--lookback", type=int, default=2)
    sp.add_argument("--qa-channel", type=int, default=None)
    sp.add_argument("--out", required=True)

    sp = add("build-dataset", cmd_build_dataset, "tile, fold and cut patch records")
    sp.add_argument("--covariates", required=True, help="manifest of co-registered rasters")
    sp.add_argument("--target", required=True)
    sp.add_argument("--tiles", default="10x10", help="ROWSxCOLS")
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--subfolds", type=int, default=5)
    sp.add_argument("--patch-size", type=int, default=64)
    sp.add_argument("--overlap", type=float, default=0.25)
    sp.add_argument("--min-density", type=float, default=0.01)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("fit-weights", cmd_fit_weights, "fit the inverse-density weight table")
    sp.add_argument("--records")
    sp.add_argument("--records-dir")
    sp.add_argument("--fold", type=int)
    sp.add_argument("--subfold", type=int)
    sp.add_argument("--samples", type=int, default=10_000_000)
    sp.add_argument("--bandwidth", default="auto")
    sp.add_argument("--clip", default="0.1,10")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train one ensemble member")
    sp.add_argument("--records-dir", required=True)
    sp.add_argument("--fold", type=int, required=True)
    sp.add_argument("--subfold", type=int, required=True)
    sp.add_argument("--model-config")
    sp.add_argument("--train-config")
    sp.add_argument("--weights")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")

    sp = add("infer", cmd_infer, "ensemble inference over a covariate raster")
    sp.add_argument("--checkpoints", nargs="+", required=True)
    sp.add_argument("--covariates", required=True)
    sp.add_argument("--stats", required=True)
    sp.add_argument("--out-height", required=True)
    sp.add_argument("--out-uncertainty", required=True)
    sp.add_argument("--window", type=int, default=64)
    sp.add_argument("--stride", type=int, default=48)

    sp = add("calibrate", cmd_calibrate, "fit the uncertainty scale factor")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--uncertainty", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--band", type=int, default=0)
    sp.add_argument("--uncertainty-kind", choices=("std", "variance"), default="std")
    sp.add_argument("--bins", type=int, default=10)
    sp.add_argument("--min-samples", type=int, default=100)
    sp.add_argument("--out-scale", required=True)
    sp.add_argument("--out-curves")

    sp = add("harmonize", cmd_harmonize, "percentile-aggregate hires tiles onto a coarse grid")
    sp.add_argument("--coarse-geometry", required=True)
    sp.add_argument("--hires-manifest", required=True, help="lines: path [min_x min_y max_x max_y]")
    sp.add_argument("--percentile", type=float, default=98.0)
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "accuracy metrics and density scatter")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--lo", type=float, default=3.0)
    sp.add_argument("--hi", type=float, default=40.0)
    sp.add_argument("--both", action="store_true", help="filter on prediction as well as reference")
    sp.add_argument("--bins", type=int, default=40)
    sp.add_argument("--out-report")
    sp.add_argument("--out-scatter")

    sp = add("pipeline", cmd_pipeline, "synthetic end-to-end run through every stage")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=640)
    sp.add_argument("--outlier-rate", type=float, default=0.05)
    sp.add_argument("--year", type=int, default=2020)
    sp.add_argument("--tiles", default="4x4")
    sp.add_argument("--folds", type=int, default=2)
    sp.add_argument("--members", type=int, default=5)
    sp.add_argument("--patch-size", type=int, default=64)
    sp.add_argument("--model-config")
    sp.add_argument("--train-config")
    sp.add_argument("--kde-samples", type=int, default=10_000_000)
    sp.add_argument("--hires-factor", type=int, default=6)
    sp.add_argument("--unweighted", dest="weighted", action="store_false")
    return p


def _truthy(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args([x for x in argv if x not in ("-v", "-vv", "--verbose")])
    if not known.config or not known.command:
        return
    cp = configparser.ConfigParser()
    if not cp.read(known.config):
        raise UsageError(f"cannot read config file {known.config}")
    if not cp.has_section(known.command):
        return
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sp = subparsers.choices.get(known.command)
    if sp is None:
        return
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, raw in cp[known.command].items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None:
            raise UsageError(f"{known.config}: unknown option {key!r} in [{known.command}]")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            # the key names the destination, so "weighted = false" means --unweighted
            defaults[dest] = _truthy(raw)
        elif action.nargs in ("+", "*"):
            defaults[dest] = raw.split()
        else:
            defaults[dest] = raw
        action.required = False
    sp.set_defaults(**defaults)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (UsageError, configparser.Error) as exc:
        print(f"canopy-uq: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose + 1, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"canopy-uq: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"canopy-uq: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"canopy-uq: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
