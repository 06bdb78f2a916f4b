"""Toy per-pixel embedding network with query/key copies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Tuple

import numpy as np

from .diffcore import Graph, Node
from .errors import ConfigError, ShapeError, UsageError


@dataclass(frozen=True)
class EncoderConfig:
    """Three 3×3 convs (the first strided) and a two-layer 1×1 projection head."""

    channels: Tuple[int, ...] = (3, 16, 32, 32)
    stride: int = 2
    head_hidden: int = 32
    dim: int = 32

    def validate(self):
        if self.dim < 2:
            raise ConfigError(f"embedding dim must be >= 2, got {self.dim}")
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ConfigError(f"channels must list 4 positive widths, got {self.channels}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.head_hidden < 1:
            raise ConfigError("head_hidden must be positive")

    def shapes(self) -> Dict[str, tuple]:
        c = self.channels
        return {
            "conv1.w": (3, 3, c[0], c[1]),
            "conv1.b": (c[1],),
            "conv2.w": (3, 3, c[1], c[2]),
            "conv2.b": (c[2],),
            "conv3.w": (3, 3, c[2], c[3]),
            "conv3.b": (c[3],),
            "head1.w": (c[3], self.head_hidden),
            "head1.b": (self.head_hidden,),
            "head2.w": (self.head_hidden, self.dim),
            "head2.b": (self.dim,),
        }

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "stride": self.stride,
            "head_hidden": self.head_hidden,
            "dim": self.dim,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EncoderConfig":
        return cls(tuple(doc["channels"]), doc["stride"], doc["head_hidden"], doc["dim"])


class EncoderParams:
    """Named float64 weight arrays in a fixed order."""

    def __init__(self, config: EncoderConfig, arrays: Mapping[str, np.ndarray]):
        shapes = config.shapes()
        if set(arrays) != set(shapes):
            raise UsageError(f"expected params {sorted(shapes)}, got {sorted(arrays)}")
        self.config = config
        self.arrays: Dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            arr = np.array(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {arr.shape}")
            self.arrays[name] = arr

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    @classmethod
    def from_flat(cls, config: EncoderConfig, flat: np.ndarray) -> "EncoderParams":
        arrays = {}
        pos = 0
        for name, shape in config.shapes().items():
            size = int(np.prod(shape))
            arrays[name] = flat[pos : pos + size].reshape(shape)
            pos += size
        if pos != flat.size:
            raise ShapeError(f"flat parameter blob has {flat.size} values, expected {pos}")
        return cls(config, arrays)

    def equals(self, other: "EncoderParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays
        )

    def distance(self, other: "EncoderParams") -> float:
        return float(np.linalg.norm(self.flat() - other.flat()))


@dataclass
class EmbeddingMap:
    features: np.ndarray  # (N, h, w, d) or (h, w, d), unit rows
    stride: int


def init_encoder(config: EncoderConfig, seed) -> Tuple[EncoderParams, EncoderParams]:
    """He-normal weights, zero biases; returns (query, key) with key an exact copy."""
    config.validate()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in config.shapes().items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    query = EncoderParams(config, arrays)
    return query, query.copy()


def embed(g: Graph, params: Mapping[str, Node], images: Node, config: EncoderConfig) -> Node:
    """Record the encoder on ``g``; returns unit-normalised (N, h, w, d) features."""
    x = g.shift(images, -0.5)
    x = g.relu(g.conv3x3(x, params["conv1.w"], params["conv1.b"], stride=config.stride))
    x = g.relu(g.conv3x3(x, params["conv2.w"], params["conv2.b"]))
    x = g.relu(g.conv3x3(x, params["conv3.w"], params["conv3.b"]))
    n, h, w, c = x.value.shape
    x = g.reshape(x, (n * h * w, c))
    x = g.relu(g.bias_add(g.matmul(x, params["head1.w"]), params["head1.b"]))
    x = g.bias_add(g.matmul(x, params["head2.w"]), params["head2.b"])
    x = g.l2_normalize(x, axis=-1)
    return g.reshape(x, (n, h, w, config.dim))


def _check_images(images, config):
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[3] != config.channels[0]:
        raise ShapeError(f"expected (N, H, W, {config.channels[0]}) images, got {images.shape}")
    h, w = images.shape[1:3]
    if h % config.stride or w % config.stride:
        raise ConfigError(f"image size {h}x{w} not divisible by stride {config.stride}")
    return images, single


def param_nodes(g: Graph, params: EncoderParams, trainable: bool = True, prefix: str = ""):
    make = g.param if trainable else (lambda name, v: g.const(v, name=name))
    return {k: make(prefix + k, v) for k, v in params.arrays.items()}


def forward_embed(params: EncoderParams, images) -> EmbeddingMap:
    """Evaluate the encoder on one (H, W, C) image or an (N, H, W, C) batch."""
    images, single = _check_images(images, params.config)
    g = Graph()
    feats = embed(g, param_nodes(g, params, trainable=False), g.const(images), params.config)
    out = feats.value
    return EmbeddingMap(out[0] if single else out, params.config.stride)


def momentum_update(key: EncoderParams, query: EncoderParams, m: float) -> EncoderParams:
    """θ_k ← m·θ_k + (1−m)·θ_q, returned as new params."""
    if not 0.0 <= m < 1.0:
        raise ConfigError(f"momentum must be in [0, 1), got {m}")
    if key.config != query.config:
        raise UsageError("key and query encoders have different architectures")
    out = {}
    for name in key.arrays:
        a, b = key.arrays[name], query.arrays[name]
        if a.shape != b.shape:
            raise UsageError(f"{name}: shape {a.shape} vs {b.shape}")
        out[name] = m * a + (1.0 - m) * b
    return EncoderParams(key.config, out)
