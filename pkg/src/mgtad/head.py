"""Multi-scale detection head.

Per-channel gating (pooled over time, shared two-layer MLP) followed by
per-time gating (pooled over channels, length-7 conv) refines every pyramid
level; each level is then fused with its resampled neighbors (mean of the
available paths) and fed to level-shared classification and offset heads.
The classification head ends in a sigmoid (per-class probabilities per time
step), the localization head in a ReLU (non-negative start/end offsets in
level timestep units).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import (
    Conv1d,
    Grid,
    Mlp2,
    downsample2,
    downsample2_backward,
    pool_over_channels,
    pool_over_channels_backward,
    pool_over_time,
    pool_over_time_backward,
    relu,
    sigmoid,
    upsample2,
    upsample2_backward,
)


@dataclass
class HeadConfig:
    num_classes: int
    channels: int = 16
    reduction: int = 4
    spatial_kernel: int = 7
    attention_enabled: bool = True

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.channels % self.reduction != 0:
            raise ValueError(
                f"reduction {self.reduction} does not divide channels {self.channels}"
            )
        if self.spatial_kernel % 2 == 0:
            raise ValueError(f"spatial kernel must be odd, got {self.spatial_kernel}")


@dataclass
class HeadOutputs:
    """Per level: class probabilities (K x T_n) and start/end offsets (2 x T_n)."""

    class_probs: list = field(default_factory=list)
    offsets: list = field(default_factory=list)


class TemporalAttention:
    """Per-channel gate from time-pooled statistics through a shared MLP."""

    def __init__(self, name: str, channels: int, reduction: int,
                 rng: np.random.Generator | None = None):
        self.mlp = Mlp2(f"{name}.mlp", channels, reduction, rng=rng)

    def params(self):
        return self.mlp.params()

    def weights(self, x: Grid):
        va, ca = pool_over_time(x, "avg")
        vm, cm = pool_over_time(x, "max")
        ya, cya = self.mlp.forward(va)
        ym, cym = self.mlp.forward(vm)
        a = sigmoid(ya + ym)
        return a, (ca, cm, cya, cym)

    def forward(self, x: Grid):
        a, wcache = self.weights(x)
        return a[:, None] * x, (x, a, wcache)

    def backward(self, cache, gy):
        x, a, (ca, cm, cya, cym) = cache
        gx = gy * a[:, None]
        gz = (gy * x).sum(axis=1) * a * (1.0 - a)
        gx += pool_over_time_backward(ca, self.mlp.backward(cya, gz))
        gx += pool_over_time_backward(cm, self.mlp.backward(cym, gz))
        return gx


class SpatialAttention:
    """Per-time gate from channel-pooled statistics through one conv."""

    def __init__(self, name: str, kernel: int, rng: np.random.Generator | None = None):
        self.conv = Conv1d(f"{name}.conv", 2, 1, kernel, rng=rng)

    def params(self):
        return self.conv.params()

    def weights(self, x: Grid):
        pa, ca = pool_over_channels(x, "avg")
        pm, cm = pool_over_channels(x, "max")
        z, cc = self.conv.forward(np.vstack([pa, pm]))
        s = sigmoid(z)
        return s, (ca, cm, cc)

    def forward(self, x: Grid):
        s, wcache = self.weights(x)
        return s * x, (x, s, wcache)

    def backward(self, cache, gy):
        x, s, (ca, cm, cc) = cache
        gx = gy * s
        gz = (gy * x).sum(axis=0, keepdims=True) * s * (1.0 - s)
        gcat = self.conv.backward(cc, gz)
        gx += pool_over_channels_backward(ca, gcat[0:1])
        gx += pool_over_channels_backward(cm, gcat[1:2])
        return gx


class STAttention:
    """Temporal gating then spatial gating; disabled mode is an exact identity."""

    def __init__(self, name: str, cfg: HeadConfig, rng: np.random.Generator | None = None):
        self.temporal = TemporalAttention(f"{name}.temporal", cfg.channels,
                                          cfg.reduction, rng=rng)
        self.spatial = SpatialAttention(f"{name}.spatial", cfg.spatial_kernel, rng=rng)
        self.enabled = cfg.attention_enabled

    def params(self):
        return self.temporal.params() + self.spatial.params()

    def forward(self, x: Grid):
        if not self.enabled:
            return x, None
        mid, ct = self.temporal.forward(x)
        out, cs = self.spatial.forward(mid)
        return out, (ct, cs)

    def backward(self, cache, gy):
        if cache is None:
            return gy
        ct, cs = cache
        return self.temporal.backward(ct, self.spatial.backward(cs, gy))


def fuse_three_paths(attended: list, i: int):
    """Mean of the level's own features and its resampled neighbors.

    The finer neighbor is halved, the coarser neighbor is nearest-repeated
    and cut (or zero-padded) to the level's length; boundary levels simply
    average fewer paths.
    """
    target_len = attended[i].shape[1]
    paths = []
    caches = []
    if i > 0:
        y, c = downsample2(attended[i - 1])
        paths.append(y)
        caches.append(("down", i - 1, c))
    paths.append(attended[i])
    caches.append(("self", i, None))
    if i < len(attended) - 1:
        y, c = upsample2(attended[i + 1])
        extra = y.shape[1] - target_len
        if extra > 0:
            y = y[:, :target_len]
        elif extra < 0:
            y = np.pad(y, ((0, 0), (0, -extra)))
        paths.append(y)
        caches.append(("up", i + 1, (c, extra)))
    fused = paths[0].copy()
    for p in paths[1:]:
        fused += p
    fused /= len(paths)
    return fused, (caches, len(paths))


def fuse_three_paths_backward(cache, gfused, g_attended: list):
    """Accumulate the fusion gradient into the attended-level gradients."""
    caches, n_paths = cache
    share = gfused / n_paths
    for kind, j, c in caches:
        if kind == "down":
            g_attended[j] += downsample2_backward(c, share)
        elif kind == "self":
            g_attended[j] += share
        else:
            up_cache, extra = c
            g = share
            if extra > 0:
                g = np.pad(g, ((0, 0), (0, extra)))
            elif extra < 0:
                g = g[:, :g.shape[1] + extra]
            g_attended[j] += upsample2_backward(up_cache, g)


class ConvHead:
    """Two ReLU conv blocks and a final projection with sigmoid or ReLU output."""

    def __init__(self, name: str, channels: int, out_channels: int, output: str,
                 rng: np.random.Generator | None = None, final_bias: float = 0.0):
        if output not in ("sigmoid", "relu"):
            raise ValueError(f"unknown head output {output!r}")
        self.output = output
        self.trunk = [Conv1d(f"{name}.trunk{j}", channels, channels, 3, rng=rng)
                      for j in range(2)]
        self.final = Conv1d(f"{name}.final", channels, out_channels, 3, rng=rng)
        self.final.bias.value[:] = final_bias

    def params(self):
        out = []
        for conv in self.trunk:
            out += conv.params()
        return out + self.final.params()

    def forward(self, x: Grid):
        caches = []
        h = x
        for conv in self.trunk:
            z, c = conv.forward(h)
            caches.append((c, z))
            h = relu(z)
        z, c = self.final.forward(h)
        y = sigmoid(z) if self.output == "sigmoid" else relu(z)
        return y, (caches, c, z, y)

    def backward(self, cache, gy):
        caches, final_cache, z, y = cache
        if self.output == "sigmoid":
            gz = gy * y * (1.0 - y)
        else:
            gz = gy * (z > 0)
        g = self.final.backward(final_cache, gz)
        for conv, (c, zt) in zip(reversed(self.trunk), reversed(caches)):
            g = conv.backward(c, g * (zt > 0))
        return g


class DetectionHead:
    """Level-shared attention, neighbor fusion, and class/offset prediction."""

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator | None = None,
                 class_prior: float = 0.02):
        self.cfg = cfg
        self.attention = STAttention("head.attention", cfg, rng=rng)
        class_bias = float(np.log(class_prior / (1.0 - class_prior)))
        self.class_head = ConvHead("head.class", cfg.channels, cfg.num_classes,
                                   "sigmoid", rng=rng, final_bias=class_bias)
        self.loc_head = ConvHead("head.loc", cfg.channels, 2, "relu", rng=rng,
                                 final_bias=1.0)

    def params(self):
        return self.attention.params() + self.class_head.params() + self.loc_head.params()

    def forward(self, levels: list):
        attended = []
        att_caches = []
        for f in levels:
            y, c = self.attention.forward(f)
            attended.append(y)
            att_caches.append(c)
        outputs = HeadOutputs()
        fuse_caches = []
        cls_caches = []
        loc_caches = []
        for i in range(len(levels)):
            fused, fc = fuse_three_paths(attended, i)
            probs, cc = self.class_head.forward(fused)
            offs, lc = self.loc_head.forward(fused)
            outputs.class_probs.append(probs)
            outputs.offsets.append(offs)
            fuse_caches.append(fc)
            cls_caches.append(cc)
            loc_caches.append(lc)
        shapes = [a.shape for a in attended]
        return outputs, (att_caches, fuse_caches, cls_caches, loc_caches, shapes)

    def backward(self, cache, g_probs: list, g_offsets: list):
        att_caches, fuse_caches, cls_caches, loc_caches, shapes = cache
        g_attended = [np.zeros(s) for s in shapes]
        for i in range(len(shapes)):
            gfused = self.class_head.backward(cls_caches[i], g_probs[i])
            gfused += self.loc_head.backward(loc_caches[i], g_offsets[i])
            fuse_three_paths_backward(fuse_caches[i], gfused, g_attended)
        return [self.attention.backward(ac, ga)
                for ac, ga in zip(att_caches, g_attended)]
