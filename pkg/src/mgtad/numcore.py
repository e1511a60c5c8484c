"""Deterministic float64 numerical core: grids, layer primitives, manual backprop.

Everything trains and tests in 64-bit; 32-bit appears only at file boundaries
(see mgtad.data). A "grid" is a C-contiguous float64 ndarray. Parameterized
layers are small classes whose ``forward`` returns ``(y, cache)`` and whose
``backward`` consumes that cache, accumulates into ``Param.grad`` and returns
the gradient w.r.t. the input. Caches are explicit so one layer instance can
be applied many times per step (shared heads, shared attention).
"""

from __future__ import annotations

import numpy as np

Grid = np.ndarray


class GridShapeError(ValueError):
    """Raised when an operand's shape violates an operation's contract."""


def as_grid(data, shape=None) -> Grid:
    """Coerce to a C-contiguous float64 array, optionally checking shape."""
    g = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None and g.shape != tuple(shape):
        raise GridShapeError(f"expected shape {tuple(shape)}, got {g.shape}")
    return g


def require_finite(g: Grid, what: str = "grid") -> Grid:
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"{what} contains non-finite entries")
    return g


def _require_axis(g: Grid, axis: int, size: int, name: str, what: str):
    if g.shape[axis] != size:
        raise GridShapeError(
            f"{what}: axis {axis} ({name}) has length {g.shape[axis]}, expected {size}"
        )


class Param:
    """A named parameter grid plus a same-shape gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = as_grid(value)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def sigmoid(z):
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x):
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# Stateless grid ops (forward returns (y, cache); *_backward maps grads back)
# ---------------------------------------------------------------------------

def pool_over_time(x: Grid, mode: str = "avg"):
    """Pool a C x T grid over the time axis down to a length-C vector."""
    if x.ndim != 2:
        raise GridShapeError(f"pool_over_time expects a 2-d grid, got {x.ndim}-d")
    if x.shape[1] < 1:
        raise GridShapeError("pool_over_time: empty time axis (T=0)")
    if mode == "avg":
        return x.mean(axis=1), ("avg", x.shape)
    if mode == "max":
        arg = np.argmax(x, axis=1)
        return x[np.arange(x.shape[0]), arg], ("max", x.shape, arg)
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool_over_time_backward(cache, gy):
    if cache[0] == "avg":
        _, shape = cache
        return np.repeat(gy[:, None] / shape[1], shape[1], axis=1)
    _, shape, arg = cache
    gx = np.zeros(shape)
    gx[np.arange(shape[0]), arg] = gy
    return gx


def pool_over_channels(x: Grid, mode: str = "avg"):
    """Pool a C x T grid over the channel axis down to a 1 x T grid."""
    if x.ndim != 2:
        raise GridShapeError(f"pool_over_channels expects a 2-d grid, got {x.ndim}-d")
    if x.shape[0] < 1:
        raise GridShapeError("pool_over_channels: empty channel axis (C=0)")
    if mode == "avg":
        return x.mean(axis=0, keepdims=True), ("avg", x.shape)
    if mode == "max":
        arg = np.argmax(x, axis=0)
        return x[arg, np.arange(x.shape[1])][None, :], ("max", x.shape, arg)
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool_over_channels_backward(cache, gy):
    if cache[0] == "avg":
        _, shape = cache
        return np.repeat(gy / shape[0], shape[0], axis=0)
    _, shape, arg = cache
    gx = np.zeros(shape)
    gx[arg, np.arange(shape[1])] = gy[0]
    return gx


def upsample2(x: Grid):
    """Nearest-neighbor repeat along time: C x T -> C x 2T."""
    if x.shape[1] < 1:
        raise GridShapeError("upsample2: empty time axis (T=0)")
    return np.repeat(x, 2, axis=1), x.shape


def upsample2_backward(cache, gy):
    return gy[:, 0::2] + gy[:, 1::2]


def downsample2(x: Grid):
    """Stride-2 window-2 max pooling along time: C x T -> C x ceil(T/2).

    Ties within a window resolve to the earlier position, which makes
    downsample2(upsample2(x)) an exact identity.
    """
    c, t = x.shape
    if t < 1:
        raise GridShapeError("downsample2: empty time axis (T=0)")
    m = t // 2
    out_len = m + (t % 2)
    y = np.empty((c, out_len))
    if m > 0:
        pairs = x[:, : 2 * m].reshape(c, m, 2)
        sel = np.argmax(pairs, axis=2)
        y[:, :m] = np.take_along_axis(pairs, sel[:, :, None], axis=2)[:, :, 0]
    else:
        sel = np.zeros((c, 0), dtype=np.intp)
    if t % 2:
        y[:, -1] = x[:, -1]
    return y, (x.shape, sel)


def downsample2_backward(cache, gy):
    (c, t), sel = cache
    m = t // 2
    gx = np.zeros((c, t))
    if m > 0:
        cols = 2 * np.arange(m)[None, :] + sel
        gx[np.arange(c)[:, None], cols] = gy[:, :m]
    if t % 2:
        gx[:, -1] += gy[:, -1]
    return gx


# ---------------------------------------------------------------------------
# Parameterized layers
# ---------------------------------------------------------------------------

def _conv_taps(k: int, dilation: int):
    half = k // 2
    return [(j, (j - half) * dilation) for j in range(k)]


class Conv1d:
    """Same-padded 1-d convolution over C x T grids, odd kernels only.

    y[o, t] = bias[o] + sum_{c,j} kernel[o, c, j] * x[c, t + (j - k//2) * dilation]
    with zeros outside [0, T); output length always equals input length.
    """

    def __init__(self, name: str, c_in: int, c_out: int, k: int, dilation: int = 1,
                 rng: np.random.Generator | None = None, scale: float | None = None):
        if k % 2 == 0:
            raise ValueError(f"{name}: kernel size must be odd, got {k}")
        if dilation < 1:
            raise ValueError(f"{name}: dilation must be >= 1, got {dilation}")
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.k = k
        self.dilation = dilation
        if rng is None:
            kernel = np.zeros((c_out, c_in, k))
        else:
            s = scale if scale is not None else 1.0 / np.sqrt(c_in * k)
            kernel = rng.uniform(-s, s, size=(c_out, c_in, k))
        self.kernel = Param(f"{name}.kernel", kernel)
        self.bias = Param(f"{name}.bias", np.zeros(c_out))

    def params(self):
        return [self.kernel, self.bias]

    def forward(self, x: Grid):
        if x.ndim != 2:
            raise GridShapeError(f"{self.name}: input must be 2-d, got {x.ndim}-d")
        _require_axis(x, 0, self.c_in, "channels", self.name)
        t = x.shape[1]
        y = np.repeat(self.bias.value[:, None], t, axis=1)
        w = self.kernel.value
        for j, off in _conv_taps(self.k, self.dilation):
            lo, hi = max(0, -off), min(t, t - off)
            if lo < hi:
                y[:, lo:hi] += w[:, :, j] @ x[:, lo + off:hi + off]
        return y, x

    def backward(self, cache, gy):
        x = cache
        t = x.shape[1]
        self.bias.grad += gy.sum(axis=1)
        w = self.kernel.value
        gx = np.zeros_like(x)
        for j, off in _conv_taps(self.k, self.dilation):
            lo, hi = max(0, -off), min(t, t - off)
            if lo < hi:
                self.kernel.grad[:, :, j] += gy[:, lo:hi] @ x[:, lo + off:hi + off].T
                gx[:, lo + off:hi + off] += w[:, :, j].T @ gy[:, lo:hi]
        return gx


class LayerNorm:
    """Normalization over the channel axis at each time step (epsilon 1e-5)."""

    EPS = 1e-5

    def __init__(self, name: str, channels: int):
        self.name = name
        self.channels = channels
        self.gain = Param(f"{name}.gain", np.ones(channels))
        self.shift = Param(f"{name}.shift", np.zeros(channels))

    def params(self):
        return [self.gain, self.shift]

    def forward(self, x: Grid):
        _require_axis(x, 0, self.channels, "channels", self.name)
        mu = x.mean(axis=0)
        xc = x - mu
        var = (xc * xc).mean(axis=0)
        inv = 1.0 / np.sqrt(var + self.EPS)
        xh = xc * inv
        y = self.gain.value[:, None] * xh + self.shift.value[:, None]
        return y, (xh, inv)

    def backward(self, cache, gy):
        xh, inv = cache
        self.gain.grad += (gy * xh).sum(axis=1)
        self.shift.grad += gy.sum(axis=1)
        gxh = gy * self.gain.value[:, None]
        # d/dx of (x - mean) / sqrt(var + eps), biased variance over channels
        return inv * (gxh - gxh.mean(axis=0) - xh * (gxh * xh).mean(axis=0))


class Mlp2:
    """Two-layer bias-free MLP on a length-C vector: C -> C/r -> C, ReLU hidden."""

    def __init__(self, name: str, channels: int, reduction: int,
                 rng: np.random.Generator | None = None, scale: float = 0.5):
        if channels % reduction != 0:
            raise ValueError(
                f"{name}: reduction ratio {reduction} does not divide {channels} channels"
            )
        self.name = name
        self.channels = channels
        hidden = channels // reduction
        if rng is None:
            w1 = np.zeros((hidden, channels))
            w2 = np.zeros((channels, hidden))
        else:
            w1 = rng.uniform(-scale, scale, size=(hidden, channels)) / np.sqrt(channels)
            w2 = rng.uniform(-scale, scale, size=(channels, hidden)) / np.sqrt(hidden)
        self.w1 = Param(f"{name}.w1", w1)
        self.w2 = Param(f"{name}.w2", w2)

    def params(self):
        return [self.w1, self.w2]

    def forward(self, v: Grid):
        if v.shape != (self.channels,):
            raise GridShapeError(
                f"{self.name}: expected vector of length {self.channels}, got {v.shape}"
            )
        z = self.w1.value @ v
        h = relu(z)
        y = self.w2.value @ h
        return y, (v, z, h)

    def backward(self, cache, gy):
        v, z, h = cache
        self.w2.grad += np.outer(gy, h)
        gh = self.w2.value.T @ gy
        gz = gh * (z > 0)
        self.w1.grad += np.outer(gz, v)
        return self.w1.value.T @ gz


class Affine:
    """Dense affine map on a vector: y = W v + b (used for gate logits)."""

    def __init__(self, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator | None = None, scale: float = 0.0):
        self.name = name
        self.n_in = n_in
        if rng is None or scale == 0.0:
            w = np.zeros((n_out, n_in))
        else:
            w = rng.uniform(-scale, scale, size=(n_out, n_in))
        self.w = Param(f"{name}.w", w)
        self.b = Param(f"{name}.b", np.zeros(n_out))

    def params(self):
        return [self.w, self.b]

    def forward(self, v: Grid):
        if v.shape != (self.n_in,):
            raise GridShapeError(f"{self.name}: expected vector of length {self.n_in}, got {v.shape}")
        return self.w.value @ v + self.b.value, v

    def backward(self, cache, gy):
        v = cache
        self.w.grad += np.outer(gy, v)
        self.b.grad += gy
        return self.w.value.T @ gy


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def grad_check(loss_fn, arrays, grads, h: float = 1e-5) -> float:
    """Worst-case relative error between analytic and central-difference grads.

    ``loss_fn()`` must recompute the scalar loss from the current (perturbed
    in place) contents of ``arrays``; ``grads`` holds the analytic gradients,
    one same-shape array per entry of ``arrays``. A non-finite loss makes the
    check fail by returning inf.
    """
    worst = 0.0
    for a, g in zip(arrays, grads):
        flat = a.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                return np.inf
            numeric = (lp - lm) / (2.0 * h)
            worst = max(worst, relative_error(numeric, gflat[i]))
    return worst
