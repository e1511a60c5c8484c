"""Multi-scale feature pyramid encoder.

Each pyramid stage halves the temporal length with stride-2 max pooling and
adds two input-conditioned branches on top of the pooled features: a
single-channel instance branch (channel-squeezed, kernel-1 gated conv,
broadcast back over channels) and a multi-kernel branch (one gated dilated
conv per kernel size, summed). Stage outputs are collected into the pyramid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import (
    Affine,
    Conv1d,
    Grid,
    GridShapeError,
    LayerNorm,
    downsample2,
    downsample2_backward,
    pool_over_channels,
    pool_over_channels_backward,
    pool_over_time,
    pool_over_time_backward,
    sigmoid,
)


@dataclass
class DynEConfig:
    channels: int = 16
    kernel_set: tuple[int, ...] = (1, 3, 5)
    window_expansion: int = 2
    num_levels: int = 5

    def __post_init__(self):
        if self.num_levels < 2:
            raise ValueError(f"num_levels must be >= 2, got {self.num_levels}")
        if self.channels < 2:
            raise ValueError(f"channels must be >= 2, got {self.channels}")
        if self.window_expansion < 1:
            raise ValueError(f"window_expansion must be >= 1, got {self.window_expansion}")
        for k in self.kernel_set:
            if k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd, got {k}")


@dataclass
class PyramidFeatures:
    """Per-level C x T_n grids, T_n = ceil(T / 2^n) for n = 1..num_levels."""

    levels: list = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    @staticmethod
    def level_lengths(t: int, num_levels: int) -> list[int]:
        out = []
        for _ in range(num_levels):
            t = -(-t // 2)
            out.append(t)
        return out


class DFAConv:
    """Input-conditioned gated convolution.

    y = sigmoid(affine(avg-pool-over-time(x))) * conv(x, k, dilation), the
    gate broadcast over time. With ``gate_enabled=False`` the gate is exactly
    1 and no gradient reaches the gate parameters.
    """

    def __init__(self, name: str, c_in: int, c_out: int, k: int, dilation: int = 1,
                 rng: np.random.Generator | None = None):
        self.name = name
        self.conv = Conv1d(f"{name}.conv", c_in, c_out, k, dilation=dilation, rng=rng)
        self.gate = Affine(f"{name}.gate", c_in, c_out)
        self.gate_enabled = True

    def params(self):
        return self.conv.params() + self.gate.params()

    def forward(self, x: Grid):
        y_conv, conv_cache = self.conv.forward(x)
        if not self.gate_enabled:
            return y_conv, (conv_cache, None, None, None, None)
        pooled, pool_cache = pool_over_time(x, "avg")
        z, aff_cache = self.gate.forward(pooled)
        g = sigmoid(z)
        y = g[:, None] * y_conv
        return y, (conv_cache, pool_cache, aff_cache, g, y_conv)

    def backward(self, cache, gy):
        conv_cache, pool_cache, aff_cache, g, y_conv = cache
        if g is None:
            return self.conv.backward(conv_cache, gy)
        gx = self.conv.backward(conv_cache, gy * g[:, None])
        gz = (gy * y_conv).sum(axis=1) * g * (1.0 - g)
        gpooled = self.gate.backward(aff_cache, gz)
        gx += pool_over_time_backward(pool_cache, gpooled)
        return gx


class DynELayer:
    """One pyramid stage: halve, normalize, add instance + multi-kernel branches."""

    def __init__(self, name: str, cfg: DynEConfig, rng: np.random.Generator | None = None):
        self.name = name
        self.cfg = cfg
        c = cfg.channels
        self.norm = LayerNorm(f"{name}.norm", c)
        self.instance_branch = DFAConv(f"{name}.instance", 1, 1, k=1, rng=rng)
        self.kernel_branches = [
            DFAConv(f"{name}.k{k}", c, c, k, dilation=cfg.window_expansion, rng=rng)
            for k in cfg.kernel_set
        ]

    def params(self):
        out = self.norm.params() + self.instance_branch.params()
        for br in self.kernel_branches:
            out += br.params()
        return out

    def forward(self, x: Grid):
        if x.shape[1] < 2:
            raise GridShapeError(
                f"{self.name}: cannot downsample a length-{x.shape[1]} sequence (need T >= 2)"
            )
        pooled, ds_cache = downsample2(x)
        normed, ln_cache = self.norm.forward(pooled)
        squeezed, sq_cache = pool_over_channels(normed, "avg")
        inst, inst_cache = self.instance_branch.forward(squeezed)
        multi = np.zeros_like(pooled)
        k_caches = []
        for br in self.kernel_branches:
            y, c = br.forward(normed)
            multi += y
            k_caches.append(c)
        out = pooled + inst + multi  # instance map broadcasts over channels
        return out, (ds_cache, ln_cache, sq_cache, inst_cache, k_caches)

    def backward(self, cache, gy):
        ds_cache, ln_cache, sq_cache, inst_cache, k_caches = cache
        g_normed = np.zeros_like(gy)
        for br, c in zip(self.kernel_branches, k_caches):
            g_normed += br.backward(c, gy)
        g_squeezed = self.instance_branch.backward(inst_cache, gy.sum(axis=0, keepdims=True))
        g_normed += pool_over_channels_backward(sq_cache, g_squeezed)
        g_pooled = gy + self.norm.backward(ln_cache, g_normed)
        return downsample2_backward(ds_cache, g_pooled)


class Encoder:
    """Input projection followed by stacked halving stages; collects all levels."""

    def __init__(self, in_channels: int, cfg: DynEConfig,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.in_channels = in_channels
        self.project = Conv1d("encoder.project", in_channels, cfg.channels, k=3, rng=rng)
        self.layers = [DynELayer(f"encoder.stage{i}", cfg, rng=rng)
                       for i in range(cfg.num_levels)]

    def params(self):
        out = self.project.params()
        for layer in self.layers:
            out += layer.params()
        return out

    def forward(self, features: Grid):
        t = features.shape[1]
        min_t = 2 ** self.cfg.num_levels
        if t < min_t:
            raise GridShapeError(
                f"input length {t} too short for {self.cfg.num_levels} pyramid levels "
                f"(minimum input length {min_t})"
            )
        x, proj_cache = self.project.forward(features)
        levels = []
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            levels.append(x)
            caches.append(cache)
        return PyramidFeatures(levels), (proj_cache, caches)

    def backward(self, cache, level_grads):
        proj_cache, caches = cache
        gx = None
        for layer, lcache, gl in zip(reversed(self.layers), reversed(caches),
                                     reversed(level_grads)):
            gy = gl.copy() if gx is None else gx + gl
            gx = layer.backward(lcache, gy)
        return self.project.backward(proj_cache, gx)


def build_pyramid(features: Grid, encoder: Encoder) -> PyramidFeatures:
    """Forward-only pyramid construction."""
    pyramid, _ = encoder.forward(features)
    return pyramid
