"""Encoder stand-in: per-layer patch features, layer concatenation, and the JVF1 format.

JVF1 layout (little-endian)::

    offset  size              field
    0       4                 magic b"JVF1"
    4       4                 u32 crops
    8       4                 u32 n_layers
    12      4                 u32 N (patches per crop)
    16      4                 u32 d_v (feature width)
    20      4                 u32 reserved, must be 0
    24      4*n_layers        i32 layer indices
    ...     4*crops*n_layers*N*d_v   f32 values, [crop][layer][patch][dim]

Values are stored as float32 and widened to float64 on load.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from tilepool.imaging import Image
from tilepool.tiling import TileSet

MAGIC = b"JVF1"
HEADER = struct.Struct("<4s5I")


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class EncoderConfig:
    base: int = 378
    patch: int = 14
    d_v: int = 8
    retained_layers: tuple[int, ...] = (-3, -9)
    # only used to report absolute layer numbers
    encoder_depth: int = 27

    def __post_init__(self):
        if self.patch < 1 or self.base % self.patch:
            raise ValueError("base must be a positive multiple of patch")
        if self.d_v < 1:
            raise ValueError("d_v must be positive")
        layers = tuple(self.retained_layers)
        if not layers or any(l >= 0 for l in layers) or len(set(layers)) != len(layers):
            raise ValueError("retained_layers must be non-empty, negative and distinct")
        object.__setattr__(self, "retained_layers", layers)

    @property
    def grid_side(self) -> int:
        return self.base // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    def absolute_layers(self) -> tuple[int, ...]:
        """Zero-based layer numbers, e.g. (-3, -9) -> (24, 18) for a 27-layer encoder."""
        return tuple(self.encoder_depth + l for l in self.retained_layers)


@dataclass(frozen=True, eq=False)
class FeatureStack:
    """Per-crop, per-layer patch features; ``values`` is (crops, layers, N, d_v)."""

    values: np.ndarray
    layer_ids: tuple[int, ...]
    grid_shape: tuple[int, int] | None = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4:
            raise ValueError(f"values must be 4-D (crops, layers, N, d_v), got {v.shape}")
        if len(self.layer_ids) != v.shape[1]:
            raise ValueError("layer_ids length does not match the layer axis")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "layer_ids", tuple(int(l) for l in self.layer_ids))
        if self.grid_shape is not None:
            gh, gw = self.grid_shape
            if gh * gw != v.shape[2]:
                raise ValueError(f"grid {gh}x{gw} does not hold N={v.shape[2]} patches")

    @property
    def crops(self) -> int:
        return self.values.shape[0]

    @property
    def n_layers(self) -> int:
        return self.values.shape[1]

    @property
    def n_patches(self) -> int:
        return self.values.shape[2]

    @property
    def d_v(self) -> int:
        return self.values.shape[3]

    @property
    def grid(self) -> tuple[int, int]:
        if self.grid_shape is not None:
            return self.grid_shape
        side = math.isqrt(self.n_patches)
        if side * side != self.n_patches:
            raise ValueError(f"N={self.n_patches} is not square; give grid_shape explicitly")
        return side, side

    def layer(self, crop: int, layer_id: int) -> np.ndarray:
        return self.values[crop, self.layer_ids.index(layer_id)]

    def __eq__(self, other):
        if not isinstance(other, FeatureStack):
            return NotImplemented
        return (
            self.layer_ids == other.layer_ids
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )


def patch_means(crop: Image, patch: int) -> np.ndarray:
    """Mean sample value of each patch, scaled to [0, 1], row-major."""
    gh, gw = crop.height // patch, crop.width // patch
    px = crop.pixels[: gh * patch, : gw * patch].astype(np.float64)
    blocks = px.reshape(gh, patch, gw, patch, crop.channels)
    return blocks.mean(axis=(1, 3, 4)).reshape(-1) / 255.0


def _layer_features(seed: int, crop_idx: int, layer_id: int, means: np.ndarray, d_v: int) -> np.ndarray:
    rng = np.random.default_rng([seed % 2**63, crop_idx, -layer_id])
    base = rng.standard_normal((means.size, d_v))
    gain = rng.standard_normal(d_v)
    return np.tanh(base + 2.0 * (means[:, None] - 0.5) * gain[None, :])


def pseudo_encode(tiles: TileSet, cfg: EncoderConfig = EncoderConfig(), seed: int = 0) -> FeatureStack:
    """Deterministic stand-in for the frozen vision encoder.

    Each feature depends on (seed, crop, layer, patch index, patch mean pixel),
    so a wrong crop changes the output. Values are rounded to float32 so a JVF
    round trip is exact.
    """
    crops = tiles.crops
    gh = crops[0].height // cfg.patch
    gw = crops[0].width // cfg.patch
    out = np.empty((len(crops), len(cfg.retained_layers), gh * gw, cfg.d_v))
    for c, crop in enumerate(crops):
        means = patch_means(crop, cfg.patch)
        for li, layer_id in enumerate(cfg.retained_layers):
            out[c, li] = _layer_features(seed, c, layer_id, means, cfg.d_v)
    out = out.astype(np.float32).astype(np.float64)
    return FeatureStack(out, cfg.retained_layers, grid_shape=(gh, gw))


def concat_layers(stack: FeatureStack, crop: int) -> np.ndarray:
    """[H(first retained) ; H(second retained)] along the feature axis: N x 2*d_v."""
    if stack.n_layers < 2:
        raise ValueError("need at least two retained layers to concatenate")
    if not 0 <= crop < stack.crops:
        raise IndexError(f"crop {crop} out of range for {stack.crops} crops")
    return np.concatenate([stack.values[crop, 0], stack.values[crop, 1]], axis=1)


def jvf_size(crops: int, n_layers: int, n_patches: int, d_v: int) -> int:
    return HEADER.size + 4 * n_layers + 4 * crops * n_layers * n_patches * d_v


def save_features(stack: FeatureStack) -> bytes:
    head = HEADER.pack(MAGIC, stack.crops, stack.n_layers, stack.n_patches, stack.d_v, 0)
    layers = np.asarray(stack.layer_ids, dtype="<i4").tobytes()
    body = np.ascontiguousarray(stack.values, dtype="<f4").tobytes()
    return head + layers + body


def load_features(buf: bytes, grid_shape: tuple[int, int] | None = None) -> FeatureStack:
    buf = bytes(buf)
    if len(buf) < HEADER.size:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise FormatError(f"bad magic, expected {MAGIC.decode()!r}", 0)
        raise FormatError(f"truncated header: {len(buf)} of {HEADER.size} bytes", len(buf))
    magic, crops, n_layers, n_patches, d_v, reserved = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC.decode()!r}", 0)
    if reserved != 0:
        raise FormatError(f"reserved field is {reserved}, expected 0", 20)
    if min(crops, n_layers, n_patches, d_v) == 0:
        raise FormatError("zero dimension in header", 4)
    expected = jvf_size(crops, n_layers, n_patches, d_v)
    if len(buf) < expected:
        raise FormatError(f"truncated: expected {expected} bytes, got {len(buf)}", len(buf))
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes", expected)
    pos = HEADER.size
    layer_ids = np.frombuffer(buf, dtype="<i4", count=n_layers, offset=pos)
    pos += 4 * n_layers
    values = np.frombuffer(buf, dtype="<f4", offset=pos).reshape(crops, n_layers, n_patches, d_v)
    return FeatureStack(values.astype(np.float64), tuple(layer_ids.tolist()), grid_shape=grid_shape)
