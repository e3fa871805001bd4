"""Masked, optionally density-weighted Laplace NLL training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import PatchRecord
from .model import ModelConfig, ResUNet, backward, build_model, to_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    epochs: int = 50
    batch: int = 256
    clip_norm: float = 1.0
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # "area" divides by N * w^2, "valid" by the number of valid pixels
    normalize: str = "area"

    def __post_init__(self) -> None:
        if self.lr0 < 0 or self.epochs < 1 or self.batch < 1 or not self.clip_norm > 0 or self.weight_decay < 0:
            raise ValueError(f"invalid training config {self}")
        if self.normalize not in ("area", "valid"):
            raise ValueError("normalize must be 'area' or 'valid'")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    mean_abs_residual: float
    mean_log_scale: float
    valid_count: int


def _prep(mu, b, target, mask, wf):
    mu = np.asarray(mu, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mu.shape != b.shape or mu.shape != y.shape or mu.shape != mask.shape:
        raise ValueError("mu, b, target and mask must share a shape")
    if mu.ndim == 2:
        mu, b, y, mask = mu[None], b[None], y[None], mask[None]
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("batch has no valid target pixels")
    y = np.where(mask, y, 0.0)
    weight = np.where(mask, 1.0 if wf is None else wf(y), 0.0)
    return mu, b, y, mask, weight, n_valid


def _denominator(shape, n_valid: int, normalize: str) -> float:
    if normalize == "valid":
        return float(n_valid)
    n, h, w = shape
    return float(n * h * w)


def laplace_nll(mu, b, target, mask, wf=None, normalize: str = "area") -> LossBreakdown:
    """Weighted Laplace negative log-likelihood over the valid pixels of a batch.

    Arrays are ``(N, w, w)`` (or a single ``(w, w)`` patch). With ``wf=None``
    every weight is 1.
    """
    mu, b, y, mask, weight, n_valid = _prep(mu, b, target, mask, wf)
    resid = np.abs(mu - y)
    log_term = np.log(2.0 * b)
    per_pixel = np.where(mask, weight * (resid / b + log_term), 0.0)
    total = per_pixel.sum(dtype=np.float64) / _denominator(mu.shape, n_valid, normalize)
    return LossBreakdown(
        total=float(total),
        mean_abs_residual=float(resid[mask].mean()),
        mean_log_scale=float(log_term[mask].mean()),
        valid_count=n_valid,
    )


def loss_gradients(mu, b, target, mask, wf=None, normalize: str = "area") -> tuple[np.ndarray, np.ndarray]:
    """Analytic d(loss)/d(mu) and d(loss)/d(b); sign(0) is taken as 0."""
    squeeze = np.asarray(mu).ndim == 2
    mu, b, y, mask, weight, n_valid = _prep(mu, b, target, mask, wf)
    scale = weight / _denominator(mu.shape, n_valid, normalize)
    diff = mu - y
    g_mu = scale * np.sign(diff) / b
    g_b = scale * (1.0 / b - np.abs(diff) / b**2)
    if squeeze:
        return g_mu[0], g_b[0]
    return g_mu, g_b


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def clip_by_global_norm(grads: Sequence[torch.Tensor], clip_norm: float) -> tuple[list[torch.Tensor], float]:
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if norm > clip_norm:
        factor = clip_norm / norm
        return [g * factor for g in grads], norm
    return list(grads), norm


def adam_step(
    params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState, lr: float, cfg: TrainConfig
) -> float:
    """One in-place update: clip, decoupled decay, then bias-corrected Adam.

    Returns the pre-clip global gradient norm.
    """
    for i, g in enumerate(grads):
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter tensor {i}")
    grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if cfg.weight_decay:
                p.sub_(lr * cfg.weight_decay * p)
            m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
            p.sub_(lr * (m / bc1) / (torch.sqrt(v / bc2) + cfg.eps))
    return norm


def _stack(records: Sequence[PatchRecord]):
    x = np.stack([r.covariates for r in records])
    y = np.stack([r.target for r in records])
    m = np.stack([r.valid_mask for r in records])
    return x, y, m


def batch_loss(model: ResUNet, records: Sequence[PatchRecord], wf=None, normalize: str = "area", chunk: int = 64):
    """Inference-mode loss over ``records`` (accumulated in chunks)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    weighted_sum, n_valid, n_area = 0.0, 0, 0
    with torch.no_grad():
        for i in range(0, len(records), chunk):
            x, y, m = _stack(records[i : i + chunk])
            out = model(to_tensor(x, dtype))
            br = laplace_nll(out.mu.double().numpy(), out.b.double().numpy(), y, m, wf, normalize="valid")
            weighted_sum += br.total * br.valid_count
            n_valid += br.valid_count
            n_area += y.size
    return weighted_sum / (n_valid if normalize == "valid" else n_area)


@dataclass
class TrainResult:
    model: ResUNet
    history: list[dict] = field(default_factory=list)


def target_normalization(records: Sequence[PatchRecord]) -> tuple[float, float]:
    """Median and mean absolute deviation of the valid targets."""
    y = np.concatenate([r.target[r.valid_mask] for r in records]).astype(np.float64)
    shift = float(np.median(y))
    scale = float(np.mean(np.abs(y - shift)))
    return shift, scale if scale > 0 else 1.0


def train_model(
    train_records: Sequence[PatchRecord],
    val_records: Sequence[PatchRecord],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    wf=None,
    model: ResUNet | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train one model; logs train/validation NLL per epoch."""
    if not train_records:
        raise ValueError("empty training split")
    if model is None:
        model = build_model(model_cfg, seed=train_cfg.seed)
    dtype = next(model.parameters()).dtype
    params = list(model.parameters())
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(train_cfg.seed)
    n = len(train_records)
    steps_per_epoch = math.ceil(n / train_cfg.batch)
    total_steps = steps_per_epoch * train_cfg.epochs
    step = 0
    history = []
    for epoch in range(1, train_cfg.epochs + 1):
        model.train()
        order = rng.permutation(n)
        loss_sum, loss_n = 0.0, 0
        for s in range(steps_per_epoch):
            batch = [train_records[i] for i in order[s * train_cfg.batch : (s + 1) * train_cfg.batch]]
            x, y, m = _stack(batch)
            out = model(to_tensor(x, dtype))
            mu, b = out.mu.detach().double().numpy(), out.b.detach().double().numpy()
            br = laplace_nll(mu, b, y, m, wf, train_cfg.normalize)
            g_mu, g_b = loss_gradients(mu, b, y, m, wf, train_cfg.normalize)
            grads = backward(model, out, torch.from_numpy(g_mu), torch.from_numpy(g_b))
            lr = cosine_lr(step, total_steps, train_cfg.lr0)
            adam_step(params, [grads[k] for k, _ in model.named_parameters()], state, lr, train_cfg)
            step += 1
            loss_sum += br.total * len(batch)
            loss_n += len(batch)
        row = {"epoch": epoch, "train_nll": loss_sum / loss_n, "lr": lr}
        row["val_nll"] = batch_loss(model, val_records, wf, train_cfg.normalize) if val_records else float("nan")
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.debug("epoch %d train %.4f val %.4f", epoch, row["train_nll"], row["val_nll"])
    model.eval()
    return TrainResult(model, history)


def write_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_nll", "val_nll", "lr"])
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in writer.fieldnames})


def config_dict(cfg) -> dict:
    return asdict(cfg)
