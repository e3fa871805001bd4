import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canopy_uq.dataset import (
    PatchRecord,
    RecordFormatError,
    extract_patches,
    make_tiles,
    read_records,
    spatial_folds,
    synth_scene,
    tile_id_raster,
    write_records,
)
from canopy_uq.grid import BBox, RasterGrid


def test_unit_square_tiles():
    g = make_tiles(BBox(0, 0, 1, 1), 2, 2)
    assert len(g) == 4
    assert all(t.area == pytest.approx(0.25) for t in g.tiles)


def test_hundred_tiles_partition():
    ext = BBox(0, 0, 240_000, 210_000)
    g = make_tiles(ext, 10, 10)
    assert len(g) == 100
    assert sum(t.area for t in g.tiles) == pytest.approx(ext.area, rel=1e-12)
    for i, a in enumerate(g.tiles):
        for b in g.tiles[i + 1 :]:
            assert a.intersection(b) is None


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.floats(1.0, 1e5), st.floats(1.0, 1e5))
def test_tile_areas_sum_to_extent(rows, cols, w, h):
    ext = BBox(-w / 3, 10.0, 2 * w / 3, 10.0 + h)
    g = make_tiles(ext, rows, cols)
    assert sum(t.area for t in g.tiles) == pytest.approx(ext.area, rel=1e-9)


def test_degenerate_extent_rejected():
    with pytest.raises(ValueError):
        make_tiles(BBox(0, 0, 1, 1), 0, 3)


def test_five_folds_over_hundred_tiles():
    folds = spatial_folds(100, k=5, seed=7)
    assert [len(f.test_tile_ids) for f in folds] == [20] * 5
    seen = sorted(t for f in folds for t in f.test_tile_ids)
    assert seen == list(range(100))
    for f in folds:
        assert not set(f.test_tile_ids) & set(f.train_tile_ids)
        assert set(f.test_tile_ids) | set(f.train_tile_ids) == set(range(100))
        assert len(f.sub_folds) == 5
        vals = [set(v) for _, v in f.sub_folds]
        assert set().union(*vals) == set(f.train_tile_ids)
        assert sum(len(v) for v in vals) == len(f.train_tile_ids)
        for tr, va in f.sub_folds:
            assert not set(tr) & set(va)
            assert set(tr) | set(va) == set(f.train_tile_ids)


def test_folds_seeded():
    assert spatial_folds(100, 5, seed=1) == spatial_folds(100, 5, seed=1)
    assert spatial_folds(100, 5, seed=1) != spatial_folds(100, 5, seed=2)


def test_too_many_folds():
    with pytest.raises(ValueError):
        spatial_folds(4, k=5)


def test_remainder_tiles_distributed():
    folds = spatial_folds(17, k=5, seed=0, n_sub=2)
    assert sorted(len(f.test_tile_ids) for f in folds) == [3, 3, 3, 4, 4]


def _rasters(h, w, density=1.0, seed=0, c=2):
    rng = np.random.default_rng(seed)
    cov = RasterGrid(rng.random((h, w, c)).astype(np.float32))
    t = rng.uniform(0, 40, (h, w)).astype(np.float32)
    t[rng.random((h, w)) >= density] = -9999.0
    return cov, RasterGrid(t)


def test_single_patch_dense():
    cov, tgt = _rasters(64, 64)
    recs = list(extract_patches(cov, tgt))
    assert len(recs) == 1 and (recs[0].col, recs[0].row) == (0, 0)


def test_stride_arithmetic():
    cov, tgt = _rasters(64, 112)
    recs = list(extract_patches(cov, tgt))
    assert [r.col for r in recs] == [0, 48]


def test_smaller_than_window_is_empty():
    cov, tgt = _rasters(40, 100)
    assert list(extract_patches(cov, tgt)) == []


@pytest.mark.parametrize("n_valid,kept", [(40, False), (41, True)])
def test_density_threshold_boundary(n_valid, kept):
    assert math.ceil(0.01 * 64 * 64) == 41
    cov, _ = _rasters(64, 64)
    t = np.full((64, 64), -9999.0, dtype=np.float32)
    idx = np.random.default_rng(0).choice(64 * 64, n_valid, replace=False)
    t.ravel()[idx] = 10.0
    recs = list(extract_patches(cov, RasterGrid(t)))
    assert (len(recs) == 1) is kept


def test_patch_invariants():
    cov, tgt = _rasters(200, 170, density=0.05, seed=3)
    for r in extract_patches(cov, tgt):
        assert r.covariates.shape == (64, 64, 2) and r.covariates.dtype == np.float32
        assert r.valid_mask.sum() >= 41
        np.testing.assert_array_equal(r.valid_mask, r.target != -9999.0)
        np.testing.assert_array_equal(r.covariates, cov.data[r.row : r.row + 64, r.col : r.col + 64])


def test_patches_cover_every_windowed_valid_pixel():
    cov, tgt = _rasters(160, 160, density=0.2, seed=4)
    covered = np.zeros((160, 160), bool)
    for r in extract_patches(cov, tgt, min_density=0.0):
        covered[r.row : r.row + 64, r.col : r.col + 64] = True
    # stride 48 windows span [0, 144); beyond lies outside every full window
    inside = np.zeros_like(covered)
    inside[:144, :144] = True
    assert np.all(covered[inside & tgt.valid_mask()])


def test_patches_stay_inside_tiles():
    cov, tgt = _rasters(256, 256, density=0.3, seed=5)
    tiles = make_tiles(cov.bbox, 2, 2)
    ids = tile_id_raster(cov, tiles)
    recs = list(extract_patches(cov, tgt, tiles=tiles))
    assert len(recs) == 4 * 4
    for r in recs:
        assert np.all(ids[r.row : r.row + 64, r.col : r.col + 64] == r.tile_id)


def test_synth_scene_exact_samples_without_outliers():
    cov, truth, sparse = synth_scene(seed=1, size=128, outlier_rate=0.0)
    m = sparse.valid_mask()
    np.testing.assert_array_equal(sparse.data[m], truth.data[m])
    assert truth.data.min() >= 0 and truth.data.max() <= 40


def test_synth_scene_track_geometry():
    _, _, sparse = synth_scene(seed=2, size=640, outlier_rate=0.05)
    m = sparse.valid_mask()
    assert np.count_nonzero(m.any(axis=0)) == 32
    assert m.mean() == pytest.approx(1 / 2 * 1 / 20, rel=1e-9)


def test_synth_scene_outliers_and_determinism():
    a = synth_scene(seed=3, size=128, outlier_rate=0.2)
    b = synth_scene(seed=3, size=128, outlier_rate=0.2)
    for x, y in zip(a, b):
        assert x.data.tobytes() == y.data.tobytes()
    m = a[2].valid_mask()
    changed = np.mean(a[2].data[m] != a[1].data[m])
    assert changed == pytest.approx(0.2, abs=0.03)


def _random_records(rng, n, w=8, c=3):
    out = []
    for _ in range(n):
        mask = rng.random((w, w)) < 0.4
        target = np.where(mask, rng.uniform(0, 40, (w, w)), -9999.0).astype(np.float32)
        cov = rng.standard_normal((w, w, c)).astype(np.float32)
        cov.ravel()[rng.integers(0, cov.size)] = np.float32(np.nextafter(np.float32(1), np.float32(2)))
        out.append(PatchRecord(cov, target, mask, int(rng.integers(0, 2**32)), int(rng.integers(0, 2**16)),
                               int(rng.integers(0, 10_000)), int(rng.integers(0, 10_000))))
    return out


def test_record_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    recs = _random_records(rng, 25)
    p = tmp_path / "r.cuqr"
    assert write_records(p, recs) == 25
    back = read_records(p)
    assert back == recs


def test_empty_record_file(tmp_path):
    p = tmp_path / "e.cuqr"
    assert write_records(p, [], w=64, c=9) == 0
    assert read_records(p) == []


def test_truncated_record_file_names_index(tmp_path):
    rng = np.random.default_rng(1)
    p = tmp_path / "t.cuqr"
    write_records(p, _random_records(rng, 5))
    size = 14 + 4 * 64 * 3 + 4 * 64 + 8
    data = p.read_bytes()
    assert len(data) == 16 + 5 * size
    p.write_bytes(data[: 16 + 3 * size + 10])
    with pytest.raises(RecordFormatError) as exc:
        read_records(p)
    assert exc.value.record_index == 3
    assert "record 3" in str(exc.value)


def test_bad_magic(tmp_path):
    p = tmp_path / "b.cuqr"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(RecordFormatError, match="magic"):
        read_records(p)
