"""Full detector: encoder + detection head, parameter registry, checkpoints.

Checkpoint layout (all little-endian): magic ``MGPM``, u32 version, u32
config length, config JSON (utf-8), u32 parameter count, then per parameter
u32 name length, name (utf-8), u32 ndim, u32 per-axis lengths, and the
float64 payload in row-major order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .encoder import DynEConfig, Encoder
from .head import DetectionHead, HeadConfig

MODEL_MAGIC = b"MGPM"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Raised for malformed checkpoint files."""


@dataclass
class ModelConfig:
    in_channels: int = 16
    channels: int = 16
    num_classes: int = 5
    kernel_set: tuple[int, ...] = (1, 3, 5)
    window_expansion: int = 2
    num_levels: int = 5
    reduction: int = 4
    spatial_kernel: int = 7
    attention_enabled: bool = True
    init_seed: int = 0

    def encoder_config(self) -> DynEConfig:
        return DynEConfig(channels=self.channels, kernel_set=tuple(self.kernel_set),
                          window_expansion=self.window_expansion,
                          num_levels=self.num_levels)

    def head_config(self) -> HeadConfig:
        return HeadConfig(num_classes=self.num_classes, channels=self.channels,
                          reduction=self.reduction, spatial_kernel=self.spatial_kernel,
                          attention_enabled=self.attention_enabled)


class Detector:
    """Feature pyramid encoder plus multi-scale attention head."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        self.encoder = Encoder(cfg.in_channels, cfg.encoder_config(), rng=rng)
        self.head = DetectionHead(cfg.head_config(), rng=rng)

    # -- parameters ---------------------------------------------------------

    def params(self):
        return self.encoder.params() + self.head.params()

    def param_dict(self):
        out = {}
        for p in self.params():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def level_strides(self):
        return [2 ** (i + 1) for i in range(self.cfg.num_levels)]

    # -- forward / backward -------------------------------------------------

    def forward(self, features: np.ndarray):
        pyramid, enc_cache = self.encoder.forward(features)
        outputs, head_cache = self.head.forward(pyramid.levels)
        return outputs, (enc_cache, head_cache)

    def backward(self, cache, g_probs, g_offsets):
        enc_cache, head_cache = cache
        level_grads = self.head.backward(head_cache, g_probs, g_offsets)
        return self.encoder.backward(enc_cache, level_grads)

    def predict(self, features: np.ndarray):
        outputs, _ = self.forward(features)
        return outputs

    # -- serialization ------------------------------------------------------

    def save(self, path):
        blob = json.dumps(asdict(self.cfg)).encode("utf-8")
        params = self.params()
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<I", MODEL_VERSION))
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", len(params)))
            for p in params:
                name = p.name.encode("utf-8")
                fh.write(struct.pack("<I", len(name)))
                fh.write(name)
                fh.write(struct.pack("<I", p.value.ndim))
                fh.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
                fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = fh.read()
        off = 0

        def take(n, what):
            nonlocal off
            if off + n > len(data):
                raise ModelFormatError(f"truncated checkpoint at byte {off} reading {what}")
            piece = data[off:off + n]
            off += n
            return piece

        if take(4, "magic") != MODEL_MAGIC:
            raise ModelFormatError("bad magic, not a detector checkpoint")
        (version,) = struct.unpack("<I", take(4, "version"))
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", take(4, "config length"))
        raw = json.loads(take(blob_len, "config").decode("utf-8"))
        raw["kernel_set"] = tuple(raw["kernel_set"])
        model = cls(ModelConfig(**raw))
        by_name = model.param_dict()
        (count,) = struct.unpack("<I", take(4, "parameter count"))
        if count != len(by_name):
            raise ModelFormatError(
                f"checkpoint has {count} parameters, model expects {len(by_name)}"
            )
        for _ in range(count):
            (name_len,) = struct.unpack("<I", take(4, "name length"))
            name = take(name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", take(4, "ndim"))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
            n = int(np.prod(shape)) if ndim else 1
            payload = take(8 * n, f"payload of {name}")
            if name not in by_name:
                raise ModelFormatError(f"unknown parameter {name} in checkpoint")
            p = by_name[name]
            if p.value.shape != shape:
                raise ModelFormatError(
                    f"parameter {name}: checkpoint shape {shape} != model shape {p.value.shape}"
                )
            p.value[...] = np.frombuffer(payload, dtype="<f8").reshape(shape)
        return model
