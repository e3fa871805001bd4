"""Compact ResUNet regressor emitting a per-pixel Laplace (mean, scale) pair.

Layout (channels-first tensors, ``N x C x H x W``)::

    stem      1x1 conv + BN                              c -> F
    encoder   level l: R residual blocks at 2^l F, then
              1x1 stride-2 conv to 2^(l+1) F             (l < depth)
    bottom    R residual blocks at 2^depth F
    decoder   nearest x2 upsample, 1x1 conv + BN,
              combine (concat skip, 1x1 conv + BN), R residual blocks
    head      1x1 conv, 2 linear outputs

The scale channel goes through ``softplus(.) + b_min`` so it is always
positive. An optional fixed affine (``target_shift``, ``target_scale``) maps
the network's standardized outputs back to meters.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

# Keras-style truncated He init: the untruncated std is inflated so that the
# +/-2 std truncated normal keeps variance 2 / fan_in.
_TRUNC_STD_CORRECTION = 0.87962566103423978


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int
    base_filters: int = 32
    depth: int = 4
    blocks_per_level: int = 2
    b_min: float = 0.01
    bn_momentum: float = 0.99
    target_shift: float = 0.0
    target_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.base_filters < 1 or self.depth < 1 or self.blocks_per_level < 0:
            raise ValueError(f"invalid model config {self}")
        if not self.b_min > 0 or not self.target_scale > 0:
            raise ValueError("b_min and target_scale must be positive")

    def widths(self) -> list[int]:
        return [self.base_filters * 2**level for level in range(self.depth + 1)]

    def to_dict(self) -> dict:
        return asdict(self)


REFERENCE_CONFIG = dict(base_filters=32, depth=4, blocks_per_level=2)
TOY_CONFIG = dict(base_filters=8, depth=3, blocks_per_level=1)


class LaplaceField(NamedTuple):
    mu: torch.Tensor
    b: torch.Tensor


def _bn(ch: int, cfg: ModelConfig) -> nn.BatchNorm2d:
    # torch momentum weights the new batch statistic
    return nn.BatchNorm2d(ch, momentum=1.0 - cfg.bn_momentum, eps=1e-3)


class ConvBN(nn.Module):
    """1x1 convolution followed by batch norm (the normed convolution)."""

    def __init__(self, cin: int, cout: int, cfg: ModelConfig):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 1, bias=False)
        self.bn = _bn(cout, cfg)

    def forward(self, x):
        return self.bn(self.conv(x))


class ResidualBlock(nn.Module):
    """Pre-activation block: BN-ReLU-conv3x3-BN-ReLU-conv3x3 plus identity."""

    def __init__(self, ch: int, cfg: ModelConfig):
        super().__init__()
        self.bn1 = _bn(ch, cfg)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)
        self.bn2 = _bn(ch, cfg)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)

    def forward(self, x):
        y = self.conv1(F.relu(self.bn1(x)))
        y = self.conv2(F.relu(self.bn2(y)))
        return x + y


class Combine(nn.Module):
    def __init__(self, cin_a: int, cin_b: int, cout: int, cfg: ModelConfig):
        super().__init__()
        self.norm = ConvBN(cin_a + cin_b, cout, cfg)

    def forward(self, decoder, skip):
        return self.norm(torch.cat([decoder, skip], dim=1))


class ResUNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        r = cfg.blocks_per_level
        self.stem = ConvBN(cfg.in_channels, widths[0], cfg)
        self.encoder = nn.ModuleList(
            nn.Sequential(*(ResidualBlock(widths[l], cfg) for _ in range(r))) for l in range(cfg.depth)
        )
        self.down = nn.ModuleList(
            nn.Conv2d(widths[l], widths[l + 1], 1, stride=2, bias=False) for l in range(cfg.depth)
        )
        self.bottom = nn.Sequential(*(ResidualBlock(widths[-1], cfg) for _ in range(r)))
        # decoder modules are indexed by the level they produce
        self.up = nn.ModuleList(ConvBN(widths[l + 1], widths[l], cfg) for l in range(cfg.depth))
        self.combine = nn.ModuleList(Combine(widths[l], widths[l], widths[l], cfg) for l in range(cfg.depth))
        self.decoder = nn.ModuleList(
            nn.Sequential(*(ResidualBlock(widths[l], cfg) for _ in range(r))) for l in range(cfg.depth)
        )
        self.head = nn.Conv2d(widths[0], 2, 1, bias=True)

    def raw(self, x: torch.Tensor) -> torch.Tensor:
        """Two-channel linear output before the scale transform."""
        factor = 2**self.cfg.depth
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected N x {self.cfg.in_channels} x H x W input, got {tuple(x.shape)}")
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ValueError(f"spatial size {tuple(x.shape[2:])} not divisible by {factor}")
        h = self.stem(x)
        skips = []
        for level in range(self.cfg.depth):
            h = self.encoder[level](h)
            skips.append(h)
            h = self.down[level](h)
        h = self.bottom(h)
        for level in reversed(range(self.cfg.depth)):
            h = self.up[level](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = self.combine[level](h, skips[level])
            h = self.decoder[level](h)
        return self.head(h)

    def forward(self, x: torch.Tensor) -> LaplaceField:
        out = self.raw(x)
        cfg = self.cfg
        mu = cfg.target_shift + cfg.target_scale * out[:, 0]
        b = cfg.target_scale * F.softplus(out[:, 1]) + cfg.b_min
        return LaplaceField(mu, b)


def he_truncated_(weight: torch.Tensor, generator: torch.Generator) -> None:
    fan_in = weight.shape[1] * weight[0, 0].numel()
    std = math.sqrt(2.0 / fan_in) / _TRUNC_STD_CORRECTION
    with torch.no_grad():
        weight.copy_(
            nn.init.trunc_normal_(
                torch.empty_like(weight), mean=0.0, std=std, a=-2 * std, b=2 * std, generator=generator
            )
        )


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> ResUNet:
    """Construct a ResUNet with deterministic truncated-He initialization."""
    model = ResUNet(cfg).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            he_truncated_(m.weight, gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            m.reset_running_stats()
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count for ``cfg``."""
    w = cfg.widths()
    r = cfg.blocks_per_level

    def block(ch):
        return 2 * (9 * ch * ch) + 2 * (2 * ch)

    total = cfg.in_channels * w[0] + 2 * w[0]  # stem
    for level in range(cfg.depth):
        total += r * block(w[level])  # encoder
        total += w[level] * w[level + 1]  # downsample
        total += w[level + 1] * w[level] + 2 * w[level]  # up conv + BN
        total += 2 * w[level] * w[level] + 2 * w[level]  # combine
        total += r * block(w[level])  # decoder
    total += r * block(w[-1])
    total += 2 * w[0] + 2  # head
    return total


def to_tensor(x: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(N, H, W, C)`` or ``(H, W, C)`` channel-last array to an NCHW tensor."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(x, -1, 1))).to(dtype)


def forward(model: ResUNet, x: np.ndarray) -> LaplaceField:
    """Inference-mode forward pass on channel-last numpy input.

    Returns numpy ``mu`` and ``b`` shaped like the input's spatial grid
    (with the batch axis kept when the input had one).
    """
    batched = np.asarray(x).ndim == 4
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(to_tensor(x, dtype))
    model.train(was_training)
    mu, b = out.mu.numpy(), out.b.numpy()
    if not batched:
        mu, b = mu[0], b[0]
    return LaplaceField(mu, b)


def forward_backward(
    model: ResUNet, x: torch.Tensor, grad_mu: torch.Tensor, grad_b: torch.Tensor
) -> dict[str, torch.Tensor]:
    """Pull upstream gradients on (mu, b) back to every parameter.

    Runs the forward pass in the model's current mode (training mode uses batch
    statistics and updates running averages). Returns gradients keyed like
    ``model.named_parameters()``.
    """
    if not (torch.isfinite(grad_mu).all() and torch.isfinite(grad_b).all()):
        raise FloatingPointError("non-finite upstream gradient")
    return backward(model, model(x), grad_mu, grad_b)


def backward(model: ResUNet, out: LaplaceField, grad_mu: torch.Tensor, grad_b: torch.Tensor) -> dict[str, torch.Tensor]:
    """Parameter gradients of ``sum(grad_mu * mu + grad_b * b)`` for an output with a live graph."""
    named = list(model.named_parameters())
    grads = torch.autograd.grad(
        outputs=[out.mu, out.b],
        inputs=[p for _, p in named],
        grad_outputs=[grad_mu.to(out.mu.dtype), grad_b.to(out.b.dtype)],
        allow_unused=True,
    )
    return {name: (g if g is not None else torch.zeros_like(p)) for (name, p), g in zip(named, grads)}


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"CUQM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_tensors(model: ResUNet) -> dict[str, torch.Tensor]:
    """Trainable parameters and batch-norm running statistics."""
    return {k: v for k, v in model.state_dict().items() if v.is_floating_point()}


def save_checkpoint(path, model: ResUNet) -> None:
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    tensors = checkpoint_tensors(model)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            raw = name.encode()
            arr = t.detach().cpu().numpy().astype("<f4")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> ResUNet:
    buf = Path(path).read_bytes()
    try:
        magic, version, n_cfg = struct.unpack_from("<4sII", buf, 0)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        cfg = ModelConfig(**json.loads(buf[off : off + n_cfg].decode()))
        off += n_cfg
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (n_name,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + n_name].decode()
            off += n_name
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 4 * n > len(buf):
                raise CheckpointError(f"{path}: tensor {name!r} truncated")
            tensors[name] = torch.from_numpy(np.frombuffer(buf, "<f4", n, off).reshape(dims).copy())
            off += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    model = ResUNet(cfg)
    expected = checkpoint_tensors(model)
    if set(expected) != set(tensors):
        raise CheckpointError(f"{path}: tensor names do not match the model config")
    model.load_state_dict(tensors, strict=False)
    model.eval()
    return model
