import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from canopy_uq.dataset import PatchRecord
from canopy_uq.model import ModelConfig
from canopy_uq.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    clip_by_global_norm,
    cosine_lr,
    laplace_nll,
    loss_gradients,
    train_model,
    write_history,
)


def _single(diff, b, w=1.0):
    mu = np.array([[diff]])
    y = np.zeros((1, 1))
    wf = (lambda z: np.full_like(z, w)) if w != 1.0 else None
    return laplace_nll(mu, np.array([[b]]), y, np.ones((1, 1), bool), wf)


def test_perfect_prediction_unit_scale_is_zero():
    y = np.random.default_rng(0).uniform(0, 30, (2, 4, 4))
    out = laplace_nll(y, np.full_like(y, 0.5), y, np.ones(y.shape, bool))
    assert out.total == 0.0


def test_single_pixel_examples():
    assert _single(2.0, 1.0).total == pytest.approx(2 + math.log(2), abs=1e-12)
    assert round(_single(2.0, 1.0).total, 4) == 2.6931
    assert round(_single(2.0, 1.0, w=2.0).total, 4) == 5.3863


def _random_batch(seed, n=3, w=6):
    rng = np.random.default_rng(seed)
    mu = rng.uniform(0, 30, (n, w, w))
    b = rng.uniform(0.2, 4, (n, w, w))
    y = rng.uniform(0, 30, (n, w, w))
    m = rng.random((n, w, w)) < 0.6
    m[0, 0, 0] = True
    return mu, b, y, m


def test_masking_removes_exactly_one_contribution():
    mu, b, y, m = _random_batch(1)
    full = laplace_nll(mu, b, y, m).total
    m2 = m.copy()
    m2[0, 0, 0] = False
    reduced = laplace_nll(mu, b, y, m2).total
    n, w = mu.shape[0], mu.shape[1]
    contrib = (abs(mu[0, 0, 0] - y[0, 0, 0]) / b[0, 0, 0] + math.log(2 * b[0, 0, 0])) / (n * w * w)
    assert full - reduced == pytest.approx(contrib, rel=1e-12, abs=1e-15)


def test_masked_pixels_ignore_garbage_targets():
    mu, b, y, m = _random_batch(2)
    y2 = np.where(m, y, np.nan)
    assert laplace_nll(mu, b, y2, m).total == laplace_nll(mu, b, y, m).total


def test_no_valid_pixels_raises():
    mu, b, y, _ = _random_batch(3)
    with pytest.raises(ValueError):
        laplace_nll(mu, b, y, np.zeros(mu.shape, bool))


def test_unit_scale_reduces_to_mae_plus_log2():
    mu, _, y, m = _random_batch(4)
    out = laplace_nll(mu, np.ones_like(mu), y, m, normalize="valid")
    assert out.total == pytest.approx(np.abs(mu - y)[m].mean() + math.log(2), rel=1e-12)
    assert out.mean_abs_residual == pytest.approx(np.abs(mu - y)[m].mean())


def test_normalization_modes():
    mu, b, y, m = _random_batch(5)
    area = laplace_nll(mu, b, y, m, normalize="area").total
    valid = laplace_nll(mu, b, y, m, normalize="valid").total
    assert area * mu.size == pytest.approx(valid * m.sum(), rel=1e-12)


def test_gradient_special_points():
    y = np.zeros((1, 1))
    mask = np.ones((1, 1), bool)
    g_mu, g_b = loss_gradients(np.zeros((1, 1)), np.array([[0.5]]), y, mask)
    assert g_mu[0, 0] == 0.0 and g_b[0, 0] == pytest.approx(2.0)
    g_mu, g_b = loss_gradients(np.array([[1.5]]), np.array([[1.5]]), y, mask)
    assert g_b[0, 0] == 0.0 and g_mu[0, 0] == pytest.approx(1 / 1.5)


@pytest.mark.parametrize("normalize", ["area", "valid"])
def test_gradients_match_finite_differences(normalize):
    mu, b, y, m = _random_batch(6)
    wf = lambda z: 0.5 + z / 30.0  # noqa: E731
    keep = np.abs(mu - y) > 1e-3
    g_mu, g_b = loss_gradients(mu, b, y, m, wf, normalize)
    # large enough to beat roundoff in the summed loss, small next to the 1e-3 kink margin
    eps = 1e-4
    for arr, g in ((mu, g_mu), (b, g_b)):
        for idx in zip(*np.nonzero(m & keep)):
            old = arr[idx]
            arr[idx] = old + eps
            up = laplace_nll(mu, b, y, m, wf, normalize).total
            arr[idx] = old - eps
            dn = laplace_nll(mu, b, y, m, wf, normalize).total
            arr[idx] = old
            num = (up - dn) / (2 * eps)
            assert g[idx] == pytest.approx(num, rel=1e-6, abs=1e-12)
    assert np.all(g_mu[~m] == 0) and np.all(g_b[~m] == 0)


def test_loss_permutation_invariant():
    mu, b, y, m = _random_batch(7, n=5)
    p = np.random.default_rng(0).permutation(5)
    assert laplace_nll(mu[p], b[p], y[p], m[p]).total == pytest.approx(laplace_nll(mu, b, y, m).total, rel=1e-14)


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, rel=1e-15)
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 1000), st.data())
def test_cosine_monotone(total, data):
    a = data.draw(st.integers(0, total))
    b = data.draw(st.integers(a, total))
    assert cosine_lr(b, total, 1.0) <= cosine_lr(a, total, 1.0)


def test_zero_gradient_no_decay_leaves_params():
    p = [torch.randn(3, 4, dtype=torch.float64)]
    before = p[0].clone()
    cfg = TrainConfig(weight_decay=0.0)
    adam_step(p, [torch.zeros_like(p[0])], AdamState.zeros_like(p), 1e-2, cfg)
    assert torch.equal(p[0], before)


def test_constant_gradient_step_size_tends_to_lr():
    p = [torch.zeros(5, dtype=torch.float64)]
    g = [torch.full((5,), 0.3, dtype=torch.float64)]
    cfg = TrainConfig(weight_decay=0.0)
    state = AdamState.zeros_like(p)
    lr = 1e-3
    for _ in range(999):
        adam_step(p, g, state, lr, cfg)
    before = p[0].clone()
    adam_step(p, g, state, lr, cfg)
    step = (before - p[0]).abs()
    np.testing.assert_allclose(step.numpy() / lr, 1.0, rtol=0.05)


def test_clip_scales_norm_ten_to_one():
    g = [torch.tensor([6.0, 8.0], dtype=torch.float64)]
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == 10.0
    assert torch.allclose(clipped[0], g[0] * 0.1)


@settings(max_examples=40, deadline=None)
@given(st.floats(1.01, 1e4), st.integers(0, 2**16))
def test_clip_preserves_direction(lam, seed):
    gen = torch.Generator().manual_seed(seed)
    g = [torch.randn(4, 3, generator=gen, dtype=torch.float64), torch.randn(5, generator=gen, dtype=torch.float64)]
    norm = math.sqrt(sum(float((t**2).sum()) for t in g))
    scaled = [t * lam / norm for t in g]  # global norm lam > clip 1
    clipped, _ = clip_by_global_norm(scaled, 1.0)
    out_norm = math.sqrt(sum(float((t**2).sum()) for t in clipped))
    assert out_norm == pytest.approx(1.0, rel=1e-12)
    for a, b in zip(clipped, g):
        assert torch.allclose(a, b / norm, rtol=1e-12, atol=1e-15)


def test_non_finite_gradient_aborts():
    p = [torch.zeros(2)]
    with pytest.raises(FloatingPointError):
        adam_step(p, [torch.tensor([0.0, float("inf")])], AdamState.zeros_like(p), 1e-3, TrainConfig())


def test_decoupled_decay():
    p = [torch.ones(3, dtype=torch.float64)]
    cfg = TrainConfig(weight_decay=0.1)
    adam_step(p, [torch.zeros(3, dtype=torch.float64)], AdamState.zeros_like(p), 0.5, cfg)
    assert torch.allclose(p[0], torch.full((3,), 1 - 0.5 * 0.1, dtype=torch.float64))


def _toy_records(seed, n, w=16, c=3):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        cov = rng.standard_normal((w, w, c)).astype(np.float32)
        target = (10 + 4 * cov[:, :, 0] - 2 * cov[:, :, 1]).astype(np.float32)
        mask = rng.random((w, w)) < 0.3
        target[~mask] = -9999.0
        out.append(PatchRecord(cov, target, mask, i % 4, 0, 0, 0))
    return out


def _cfg(**kw):
    return ModelConfig(in_channels=3, base_filters=4, depth=2, blocks_per_level=1, target_shift=10.0, target_scale=4.0, **kw)


def test_training_reduces_validation_nll(tmp_path):
    tr, va = _toy_records(0, 24), _toy_records(1, 8)
    res = train_model(tr, va, _cfg(), TrainConfig(lr0=3e-3, epochs=15, batch=8))
    h = res.history
    assert len(h) == 15
    assert h[-1]["val_nll"] < h[0]["val_nll"]
    assert h[-1]["lr"] < h[0]["lr"]
    p = tmp_path / "log.csv"
    write_history(p, h)
    assert p.read_text().splitlines()[0] == "epoch,train_nll,val_nll,lr"


def test_zero_learning_rate_only_moves_running_stats():
    from canopy_uq.model import build_model

    model = build_model(_cfg(), seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train_model(_toy_records(2, 8), [], _cfg(), TrainConfig(lr0=0.0, epochs=2, batch=4), model=model)
    moved = set()
    for k, v in model.state_dict().items():
        if not torch.equal(v, before[k]):
            moved.add(k.rsplit(".", 1)[1])
    assert moved <= {"running_mean", "running_var", "num_batches_tracked"}
    assert "running_mean" in moved


def test_training_is_deterministic():
    tr = _toy_records(3, 8)
    cfg = TrainConfig(lr0=1e-3, epochs=2, batch=4, seed=11)
    a = train_model(tr, [], _cfg(), cfg).model.state_dict()
    b = train_model(tr, [], _cfg(), cfg).model.state_dict()
    for k in a:
        assert torch.equal(a[k], b[k])


def test_empty_split_rejected():
    with pytest.raises(ValueError):
        train_model([], [], _cfg(), TrainConfig())
