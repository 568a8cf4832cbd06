"""Desk-scale convolutional feature pyramid and the pyramid file container.

The built-in network is a stack of stride-2 3x3 conv + relu stages; each stage
output is one pyramid level.  Pyramids computed elsewhere (e.g. from a large
pretrained transformer) can be brought in through :func:`import_pyramid`.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ParseError, ShapeError
from .rng import substream

PYRAMID_MAGIC = b"VQAPYR01"


@dataclass
class BackboneConfig:
    channels_per_stage: list = field(default_factory=lambda: [16, 32, 64, 128])
    stride_per_stage: list = field(default_factory=lambda: [2, 2, 2, 2])
    kernel_size: int = 3
    in_channels: int = 3

    def __post_init__(self):
        self.channels_per_stage = [int(c) for c in self.channels_per_stage]
        self.stride_per_stage = [int(s) for s in self.stride_per_stage]
        if not self.channels_per_stage:
            raise ConfigError("backbone needs at least one stage")
        if len(self.channels_per_stage) != len(self.stride_per_stage):
            raise ConfigError("channels_per_stage and stride_per_stage differ in length")
        if any(c < 1 for c in self.channels_per_stage) or any(s < 1 for s in self.stride_per_stage):
            raise ConfigError("channel counts and strides must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")

    @property
    def stage_count(self):
        return len(self.channels_per_stage)

    @property
    def total_stride(self):
        return int(np.prod(self.stride_per_stage))

    def stage_shapes(self, height, width):
        """Output (C, h, w) per stage for an input of the given size."""
        self.check_input(height, width)
        shapes = []
        for c, s in zip(self.channels_per_stage, self.stride_per_stage):
            height, width = height // s, width // s
            shapes.append((c, height, width))
        return shapes

    def check_input(self, height, width):
        t = self.total_stride
        if height % t or width % t:
            raise ShapeError(f"input {height}x{width} not divisible by cumulative stride {t}", node="backbone")

    def to_dict(self):
        return {"channels_per_stage": list(self.channels_per_stage),
                "stride_per_stage": list(self.stride_per_stage),
                "kernel_size": self.kernel_size, "in_channels": self.in_channels}


@dataclass
class FeaturePyramid:
    stages: list

    def validate(self):
        prev = None
        for s, fmap in enumerate(self.stages):
            if fmap.ndim != 3:
                raise ShapeError(f"stage {s} must be C x h x w, got shape {fmap.shape}", node="pyramid")
            bad = np.argwhere(~np.isfinite(fmap))
            if bad.size:
                c, y, x = bad[0]
                raise ParseError(f"non-finite value in stage {s} at channel {c}, row {y}, column {x}")
            if prev is not None and (fmap.shape[1] > prev[0] or fmap.shape[2] > prev[1]):
                raise ShapeError(f"stage {s} is spatially larger than stage {s - 1}", node="pyramid")
            prev = fmap.shape[1:]
        return self


def init_params(config, seed=0, prefix="backbone"):
    """Kaiming-uniform (fan-in) conv weights and zero biases."""
    rng = substream(seed, f"init:{prefix}")
    params = {}
    cin = config.in_channels
    k = config.kernel_size
    for s, cout in enumerate(config.channels_per_stage):
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        params[f"{prefix}.s{s}.weight"] = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        params[f"{prefix}.s{s}.bias"] = np.zeros(cout)
        cin = cout
    return params


def forward_stages(x, params, config, prefix="backbone"):
    """Differentiable pyramid for a batch ``x`` of shape (N, 3, H, W)."""
    x = dc._wrap(x)
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ShapeError(f"expected (N, {config.in_channels}, H, W) input, got {x.shape}", node="backbone")
    config.check_input(x.shape[2], x.shape[3])
    pad = config.kernel_size // 2
    stages = []
    for s, stride in enumerate(config.stride_per_stage):
        x = dc.relu(dc.conv2d(x, params[f"{prefix}.s{s}.weight"], params[f"{prefix}.s{s}.bias"],
                              stride=stride, padding=pad))
        stages.append(x)
    return stages


def extract(frame, params, config):
    """Pyramid for one (H, W, 3) RGB frame."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != config.in_channels:
        raise ShapeError(f"expected (H, W, {config.in_channels}) frame, got {frame.shape}", node="backbone")
    x = frame.transpose(2, 0, 1)[None]
    stages = forward_stages(x, {k: dc.Tensor(v) for k, v in params.items()}, config)
    return FeaturePyramid([s.data[0].copy() for s in stages])


def export_pyramid(path, pyramid):
    """Write ``magic | u32 stage count | per stage u32 C,h,w | float64 LE payloads``."""
    with open(path, "wb") as fh:
        fh.write(PYRAMID_MAGIC)
        fh.write(struct.pack("<I", len(pyramid.stages)))
        for fmap in pyramid.stages:
            fh.write(struct.pack("<3I", *fmap.shape))
        for fmap in pyramid.stages:
            fh.write(np.ascontiguousarray(fmap, dtype="<f8").tobytes())


def import_pyramid(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != PYRAMID_MAGIC:
        raise ParseError(f"not a pyramid container (magic {blob[:8]!r})", offset=0)
    if len(blob) < 12:
        raise ParseError("truncated pyramid header", offset=8)
    (count,) = struct.unpack_from("<I", blob, 8)
    pos = 12
    shapes = []
    for s in range(count):
        if pos + 12 > len(blob):
            raise ParseError(f"header truncated at stage {s}", offset=pos)
        shapes.append(struct.unpack_from("<3I", blob, pos))
        pos += 12
    stages = []
    for s, shape in enumerate(shapes):
        n = int(np.prod(shape))
        if pos + 8 * n > len(blob):
            raise ParseError(f"payload missing or short at stage {s}", offset=pos)
        stages.append(np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape))
        pos += 8 * n
    if pos != len(blob):
        raise ParseError(f"{len(blob) - pos} unexpected trailing bytes", offset=pos)
    return FeaturePyramid(stages).validate()
