"""CBAM fusion of two same-scale feature maps, the ECA alternative, and
attention introspection (channel-weight profiles, CAM heatmaps)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from .nn import Module, Parameter, uniform_init
from .tensor import (
    Tensor,
    add,
    channel_pool,
    concat_channels,
    conv1d_channels,
    conv2d,
    global_pool,
    linear,
    mul,
    no_grad,
    reshape,
    sigmoid,
)

NUM_LEVELS = 5
SPATIAL_KERNEL = 7


def default_reduction(channels: int) -> int:
    """Bottleneck ratio: 16 for wide inputs, otherwise channels/4 (at least 1)."""
    return 16 if channels >= 16 else max(1, channels // 4)


def default_eca_width(channels: int) -> int:
    t = int(abs((np.log2(channels) + 1) / 2))
    return t if t % 2 else t + 1


class ChannelAttention(Module):
    def __init__(self, channels: int, rng: np.random.Generator, reduction: int | None = None):
        r = default_reduction(channels) if reduction is None else reduction
        if r < 1 or channels % r:
            raise ValueError(f"channel count {channels} not divisible by reduction ratio {r}")
        self.channels = channels
        self.reduction = r
        hidden = channels // r
        self.w0 = Parameter(uniform_init(rng, (hidden, channels), channels))
        self.w1 = Parameter(uniform_init(rng, (channels, hidden), hidden))

    def forward(self, f: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.channels:
            raise ValueError(f"channel attention expects {self.channels} channels, got shape {f.shape}")
        b, c = f.shape[:2]
        # shared bottleneck on both pooled descriptors, no bias, no nonlinearity in between
        avg = linear(linear(global_pool(f, "avg"), self.w0), self.w1)
        mx = linear(linear(global_pool(f, "max"), self.w0), self.w1)
        return reshape(sigmoid(add(avg, mx)), (b, c, 1, 1))


class EcaAttention(Module):
    """Channel gate from a 1-D convolution over the average-pooled descriptor."""

    def __init__(self, channels: int, rng: np.random.Generator, k: int | None = None):
        k = default_eca_width(channels) if k is None else k
        if k % 2 == 0:
            raise ValueError(f"ECA kernel width must be odd, got {k}")
        self.channels = channels
        self.kernel = Parameter(uniform_init(rng, (k,), k))

    def forward(self, f: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.channels:
            raise ValueError(f"ECA attention expects {self.channels} channels, got shape {f.shape}")
        return eca_attention(f, self.kernel)


class SpatialAttention(Module):
    def __init__(self, rng: np.random.Generator):
        fan_in = 2 * SPATIAL_KERNEL * SPATIAL_KERNEL
        self.kernel = Parameter(uniform_init(rng, (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL), fan_in))
        self.bias = Parameter(uniform_init(rng, (1,), fan_in))

    def forward(self, f: Tensor) -> Tensor:
        planes = concat_channels(channel_pool(f, "mean"), channel_pool(f, "max"))
        return sigmoid(conv2d(planes, self.kernel, self.bias, stride=1, padding=SPATIAL_KERNEL // 2))


class FusionModule(Module):
    """Channel gate, then spatial gate, then a 1x1 conv back to the per-modality width."""

    def __init__(self, cfeat: int, rng: np.random.Generator, level: int = 0, kind: str = "cbam",
                 reduction: int | None = None, eca_k: int | None = None):
        c = 2 * cfeat
        self.cfeat = cfeat
        self.level = level
        self.kind = kind
        if kind == "cbam":
            self.channel_attn = ChannelAttention(c, rng, reduction)
        elif kind == "eca":
            self.channel_attn = EcaAttention(c, rng, eca_k)
        else:
            raise ValueError(f"unknown fusion module kind {kind!r}")
        self.spatial_attn = SpatialAttention(rng)
        # start close to the mean of both modalities, compensating the ~0.25 gain of two ~0.5 masks
        w = np.zeros((cfeat, c, 1, 1))
        for i in range(cfeat):
            w[i, i, 0, 0] = w[i, cfeat + i, 0, 0] = 2.0
        self.reduce_weight = Parameter(w)
        self.reduce_bias = Parameter(np.zeros(cfeat))

    def attend(self, f_rgb: Tensor, f_x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """Return (concatenated F, channel mask, F'') for inspection."""
        if f_rgb.shape != f_x.shape:
            raise ValueError(f"fusion inputs differ in shape: {f_rgb.shape} vs {f_x.shape}")
        if f_rgb.shape[1] != self.cfeat:
            raise ValueError(f"fusion module sized for {self.cfeat} channels, got {f_rgb.shape[1]}")
        f = concat_channels(f_rgb, f_x)
        mc = self.channel_attn(f)
        f1 = mul(f, mc)
        f2 = mul(f1, self.spatial_attn(f1))
        return f, mc, f2

    def forward(self, f_rgb: Tensor, f_x: Tensor) -> Tensor:
        _, _, f2 = self.attend(f_rgb, f_x)
        return conv2d(f2, self.reduce_weight, self.reduce_bias)


def cbam_fuse(f_rgb: Tensor, f_x: Tensor, module: FusionModule) -> Tensor:
    return module(f_rgb, f_x)


def channel_attention(f: Tensor, ca: ChannelAttention) -> Tensor:
    return ca(f)


def spatial_attention(f: Tensor, sa: SpatialAttention) -> Tensor:
    return sa(f)


def eca_attention(f: Tensor, kernel: Tensor) -> Tensor:
    """ECA mask of ``f`` for an explicit odd-width 1-D ``kernel``."""
    if f.ndim != 4:
        raise ValueError(f"eca_attention expects [B,C,H,W], got shape {f.shape}")
    if kernel.ndim != 1 or kernel.shape[0] % 2 == 0:
        raise ValueError(f"ECA kernel width must be odd, got shape {kernel.shape}")
    b, c = f.shape[:2]
    return reshape(sigmoid(conv1d_channels(global_pool(f, "avg"), kernel)), (b, c, 1, 1))


class FusionBank(Module):
    """One fusion module per pyramid level, trained for one scene (or all)."""

    def __init__(self, scene: str, cfeat: int, rng: np.random.Generator, kind: str = "cbam",
                 reduction: int | None = None):
        self.scene = scene
        self.kind = kind
        self.modules = [FusionModule(cfeat, rng, level, kind, reduction) for level in range(NUM_LEVELS)]
        # per-bank trainable head, only used when the detector head is trained with the bank
        self.head = None

    def forward(self, pyr_rgb: Sequence[Tensor], pyr_x: Sequence[Tensor]) -> List[Tensor]:
        if len(pyr_rgb) != NUM_LEVELS or len(pyr_x) != NUM_LEVELS:
            raise ValueError(f"expected {NUM_LEVELS} pyramid levels, got {len(pyr_rgb)} and {len(pyr_x)}")
        return [m(a, b) for m, a, b in zip(self.modules, pyr_rgb, pyr_x)]


# ---------------------------------------------------------------- parameter accounting


@dataclass(frozen=True)
class ParamCount:
    total: int
    trainable: int


def param_count(module: Module) -> ParamCount:
    total = trainable = 0
    for p in module.parameters():
        total += p.data.size
        if not p.frozen:
            trainable += p.data.size
    return ParamCount(total, trainable)


def fusion_param_formula(cfeat: int, reduction: int | None = None) -> int:
    """Closed-form parameter count of one CBAM fusion module."""
    c = 2 * cfeat
    r = default_reduction(c) if reduction is None else reduction
    mlp = 2 * c * (c // r)
    spatial = 2 * SPATIAL_KERNEL * SPATIAL_KERNEL + 1
    reduce = c * cfeat + cfeat
    return mlp + spatial + reduce


# ---------------------------------------------------------------- introspection


def minmax_normalize(v: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant input maps to all zeros."""
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


@dataclass
class ChannelProfile:
    level: int
    scene: str
    values: np.ndarray  # normalized, length 2*cfeat
    labels: List[str]

    def write(self, path: Union[str, Path]) -> None:
        lines = [f"# level={self.level} scene={self.scene} channels={len(self.values)}"]
        lines += [f"{v:.10f}" for v in self.values]
        Path(path).write_text("\n".join(lines) + "\n")


def export_channel_attention(bank: FusionBank, pyramids: Sequence[Tuple[Sequence[Tensor], Sequence[Tensor]]],
                             level: int) -> ChannelProfile:
    """Average the channel masks of ``level`` over (rgb, x) pyramid pairs, min-max normalized.

    The first ``cfeat`` entries are RGB channels, the rest X channels.
    """
    if not pyramids:
        raise ValueError("export_channel_attention: empty sample slice")
    module = bank.modules[level]
    acc = None
    n = 0
    with no_grad():
        for pyr_rgb, pyr_x in pyramids:
            _, mc, _ = module.attend(pyr_rgb[level], pyr_x[level])
            masks = mc.data[:, :, 0, 0]
            acc = masks.sum(axis=0) if acc is None else acc + masks.sum(axis=0)
            n += masks.shape[0]
    mean = acc / n
    cf = module.cfeat
    labels = [f"rgb{i}" for i in range(cf)] + [f"x{i}" for i in range(cf)]
    return ChannelProfile(level, bank.scene, minmax_normalize(mean), labels)


def cam_heatmap(activations: Union[Tensor, np.ndarray], iters: int = 200, tol: float = 1e-10,
                seed: int = 0) -> np.ndarray:
    """Eigen-CAM style map: activations projected on their dominant component.

    Returns an ``[H, W]`` array in [0, 1]. All-zero activations give all zeros.
    """
    a = activations.data if isinstance(activations, Tensor) else np.asarray(activations, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError(f"cam_heatmap expects a single image, got batch {a.shape[0]}")
        a = a[0]
    c, h, w = a.shape
    m = a.reshape(c, h * w)
    if not np.any(m):
        return np.zeros((h, w))
    gram = m @ m.T
    u = np.random.default_rng(seed).normal(size=c)
    u /= np.linalg.norm(u)
    for _ in range(iters):
        nxt = gram @ u
        norm = np.linalg.norm(nxt)
        if norm == 0:
            break
        nxt /= norm
        if np.linalg.norm(nxt - u) < tol:
            u = nxt
            break
        u = nxt
    proj = m.T @ u
    if proj[np.argmax(np.abs(proj))] < 0:
        proj = -proj
    return minmax_normalize(proj).reshape(h, w)


def write_heatmap(path: Union[str, Path], heat: np.ndarray, level: int, scene: str) -> None:
    lines = [f"# level={level} scene={scene} channels=1", f"# shape={heat.shape[0]}x{heat.shape[1]}"]
    lines += [f"{v:.10f}" for v in heat.reshape(-1)]
    Path(path).write_text("\n".join(lines) + "\n")
