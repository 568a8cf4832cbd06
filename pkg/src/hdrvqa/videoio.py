"""Video ingestion and the 1-fps / bicubic preprocessing front end.

Decoding covers already-decoded containers only: YUV4MPEG2 (``.y4m``) and raw
planar YUV with a JSON sidecar.  Frames are kept as tuples of integer planes at
their native bit depth; conversion to RGB happens after temporal sampling so
unused frames are never converted.
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DataError, ParseError

log = logging.getLogger(__name__)

Y4M_MAGIC = b"YUV4MPEG2"

# chroma tag -> (pixel_format, bit_depth)
_Y4M_CHROMA = {
    "420": ("yuv420", 8),
    "420jpeg": ("yuv420", 8),
    "420paldv": ("yuv420", 8),
    "420mpeg2": ("yuv420", 8),
    "444": ("yuv444", 8),
    "420p10": ("yuv420", 10),
    "444p10": ("yuv444", 10),
}

# luma coefficients (Kr, Kb)
BT709 = (0.2126, 0.0722)
BT2020 = (0.2627, 0.0593)


@dataclass
class FrameSequence:
    frames: list
    width: int
    height: int
    frame_rate: Fraction
    bit_depth: int = 8
    pixel_format: str = "yuv420"
    transfer_tag: str = "bt709"
    color_range: str = "limited"

    @property
    def frame_count(self):
        return len(self.frames)

    def validate(self):
        if self.bit_depth not in (8, 10):
            raise DataError(f"unsupported bit depth {self.bit_depth}")
        expected = plane_shapes(self.width, self.height, self.pixel_format)
        peak = (1 << self.bit_depth) - 1
        for i, frame in enumerate(self.frames):
            if tuple(p.shape for p in frame) != expected:
                raise DataError(f"frame {i} plane shapes {[p.shape for p in frame]} != {expected}")
            for p in frame:
                if p.size and (p.min() < 0 or p.max() > peak):
                    raise DataError(f"frame {i} has samples outside [0, {peak}]")
        return self


@dataclass
class SampledClip:
    """RGB float frames (H', W', 3) in [0, 1] with their source frame indices."""
    frames: list
    source_indices: list = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    def array(self):
        """Frames stacked as (K, 3, H', W') for the backbone."""
        return np.ascontiguousarray(np.stack(self.frames).transpose(0, 3, 1, 2))


def plane_shapes(width, height, pixel_format):
    if pixel_format == "yuv420":
        cw, ch = (width + 1) // 2, (height + 1) // 2
        return ((height, width), (ch, cw), (ch, cw))
    if pixel_format in ("yuv444", "rgb"):
        return ((height, width),) * 3
    raise DataError(f"unsupported pixel format {pixel_format!r}")


def _parse_rate(text):
    text = str(text)
    if ":" in text or "/" in text:
        num, den = text.replace(":", "/").split("/")
        return Fraction(int(num), int(den))
    return Fraction(text)


# Y4M

def _parse_y4m_header(line):
    tokens = line.split(b" ")
    if tokens[0] != Y4M_MAGIC:
        raise ParseError("missing YUV4MPEG2 signature", offset=0)
    info = {"chroma": "420", "range": "limited", "rate": None}
    for tok in tokens[1:]:
        if not tok:
            continue
        tag, val = chr(tok[0]), tok[1:].decode("ascii", "replace")
        if tag == "W":
            info["width"] = int(val)
        elif tag == "H":
            info["height"] = int(val)
        elif tag == "F":
            info["rate"] = _parse_rate(val)
        elif tag == "C":
            info["chroma"] = val
        elif tag == "X" and val.upper().startswith("COLORRANGE="):
            info["range"] = "full" if val.split("=", 1)[1].upper() == "FULL" else "limited"
        elif tag == "X" and val.upper().startswith("TRANSFER="):
            info["transfer"] = val.split("=", 1)[1].lower()
        # I (interlace) and A (aspect) are accepted and ignored
    if "width" not in info or "height" not in info:
        raise ParseError("Y4M header lacks W or H", offset=0)
    if info["chroma"] not in _Y4M_CHROMA:
        raise ParseError(f"unsupported chroma tag C{info['chroma']}", offset=0)
    if info["rate"] is None or info["rate"] <= 0:
        raise ParseError("Y4M header lacks a positive frame rate (F)", offset=0)
    return info


def _read_line(stream, offset, limit=4096):
    buf = bytearray()
    while True:
        ch = stream.read(1)
        if not ch:
            return bytes(buf), False
        if ch == b"\n":
            return bytes(buf), True
        buf += ch
        if len(buf) > limit:
            raise ParseError("header line too long", offset=offset)


def _read_exact(stream, n):
    chunks, got = [], 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            break
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def _planes_from_bytes(payload, shapes, bit_depth):
    dtype = np.dtype("<u2") if bit_depth > 8 else np.dtype("u1")
    planes, pos = [], 0
    for shp in shapes:
        n = shp[0] * shp[1]
        planes.append(np.frombuffer(payload, dtype=dtype, count=n, offset=pos).reshape(shp).astype(np.uint16))
        pos += n * dtype.itemsize
    return tuple(planes)


def iter_y4m(stream):
    """Yield ``(header_info, frame)`` pairs, reading the stream incrementally."""
    header, ok = _read_line(stream, 0)
    if not ok:
        raise ParseError("unterminated Y4M header", offset=len(header))
    info = _parse_y4m_header(header)
    pixel_format, bit_depth = _Y4M_CHROMA[info["chroma"]]
    info["pixel_format"], info["bit_depth"] = pixel_format, bit_depth
    shapes = plane_shapes(info["width"], info["height"], pixel_format)
    frame_bytes = sum(h * w for h, w in shapes) * (2 if bit_depth > 8 else 1)
    offset = len(header) + 1
    index = 0
    while True:
        line, ok = _read_line(stream, offset)
        if not line and not ok:
            return
        if not line.startswith(b"FRAME"):
            raise ParseError(f"expected FRAME marker, found {line[:16]!r}", offset=offset, frame_index=index)
        if not ok:
            raise ParseError("unterminated FRAME marker", offset=offset, frame_index=index)
        offset += len(line) + 1
        payload = _read_exact(stream, frame_bytes)
        if len(payload) != frame_bytes:
            raise ParseError(f"truncated frame payload: {len(payload)} of {frame_bytes} bytes",
                             offset=offset + len(payload), frame_index=index)
        yield info, _planes_from_bytes(payload, shapes, bit_depth)
        offset += frame_bytes
        index += 1


def decode_y4m(stream):
    frames, info = [], None
    for info, frame in iter_y4m(stream):
        frames.append(frame)
    if info is None:
        raise ParseError("Y4M file contains no frames", offset=0, frame_index=0)
    return FrameSequence(frames=frames, width=info["width"], height=info["height"],
                         frame_rate=info["rate"], bit_depth=info["bit_depth"],
                         pixel_format=info["pixel_format"],
                         transfer_tag=info.get("transfer", "pq" if info["bit_depth"] == 10 else "bt709"),
                         color_range=info["range"])


def _sidecar_path(path):
    for cand in (path + ".json", os.path.splitext(path)[0] + ".json"):
        if os.path.exists(cand):
            return cand
    raise ParseError(f"no JSON sidecar found for raw video {path}")


def read_sidecar(path):
    try:
        with open(path) as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"sidecar {path} is not valid JSON: {exc.msg}", offset=exc.pos) from None
    for key in ("width", "height", "fps", "bit_depth", "pixel_format"):
        if key not in meta:
            raise ParseError(f"sidecar {path} lacks {key!r}")
    if meta["bit_depth"] not in (8, 10):
        raise ParseError(f"sidecar bit_depth {meta['bit_depth']} not in (8, 10)")
    if meta["pixel_format"] not in ("yuv420", "yuv444"):
        raise ParseError(f"unsupported pixel_format {meta['pixel_format']!r}")
    rng = meta.get("range", "limited")
    if rng not in ("limited", "full"):
        raise ParseError(f"unknown range {rng!r}")
    return meta


def decode_raw(path, meta=None):
    meta = meta or read_sidecar(_sidecar_path(path))
    width, height, bit_depth = int(meta["width"]), int(meta["height"]), int(meta["bit_depth"])
    shapes = plane_shapes(width, height, meta["pixel_format"])
    frame_bytes = sum(h * w for h, w in shapes) * (2 if bit_depth > 8 else 1)
    frames = []
    with open(path, "rb") as fh:
        while True:
            payload = _read_exact(fh, frame_bytes)
            if not payload:
                break
            if len(payload) != frame_bytes:
                raise ParseError(f"truncated frame payload: {len(payload)} of {frame_bytes} bytes",
                                 offset=len(frames) * frame_bytes + len(payload), frame_index=len(frames))
            frames.append(_planes_from_bytes(payload, shapes, bit_depth))
    seq = FrameSequence(frames=frames, width=width, height=height, frame_rate=_parse_rate(meta["fps"]),
                        bit_depth=bit_depth, pixel_format=meta["pixel_format"],
                        transfer_tag=meta.get("transfer", "pq" if bit_depth == 10 else "bt709"),
                        color_range=meta.get("range", "limited"))
    peak = (1 << bit_depth) - 1
    for i, frame in enumerate(frames):
        if any(int(p.max()) > peak for p in frame if p.size):
            raise ParseError(f"sample exceeds {bit_depth}-bit range", frame_index=i)
    return seq


def decode(path):
    """Decode a ``.y4m`` file or a raw planar YUV file with a JSON sidecar."""
    with open(path, "rb") as fh:
        head = fh.read(len(Y4M_MAGIC))
    if head == Y4M_MAGIC:
        with open(path, "rb") as fh:
            return decode_y4m(fh)
    return decode_raw(path)


def write_y4m(path, frames, width, height, frame_rate, bit_depth=8, pixel_format="yuv420",
              color_range=None):
    """Write planar frames (tuples of integer planes) as Y4M."""
    tag = {("yuv420", 8): "420jpeg", ("yuv444", 8): "444",
           ("yuv420", 10): "420p10", ("yuv444", 10): "444p10"}[(pixel_format, bit_depth)]
    rate = Fraction(frame_rate)
    header = f"YUV4MPEG2 W{width} H{height} F{rate.numerator}:{rate.denominator} Ip A1:1 C{tag}"
    if color_range:
        header += f" XCOLORRANGE={color_range.upper()}"
    dtype = "<u2" if bit_depth > 8 else "u1"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        for frame in frames:
            fh.write(b"FRAME\n")
            for plane in frame:
                fh.write(np.ascontiguousarray(plane, dtype=dtype).tobytes())


# temporal sampling

def temporal_sample(frame_count, frame_rate):
    """Indices floor(R*i) for i < floor(N/R), computed in exact rational arithmetic."""
    rate = Fraction(frame_rate)
    if rate <= 0:
        raise DataError(f"frame rate must be positive, got {rate}")
    if frame_count < rate:
        raise DataError(f"video shorter than one second ({frame_count} frames at {float(rate):g} fps)")
    k = math.floor(Fraction(frame_count) / rate)
    return [math.floor(rate * i) for i in range(k)]


# colour conversion

def to_rgb(frame, bit_depth, pixel_format, color_range="limited"):
    """Convert planar samples to an (H, W, 3) float RGB frame in [0, 1].

    BT.709 coefficients for 8-bit input, BT.2020 non-constant luminance for
    10-bit input.  Values stay in the coded (gamma or PQ) domain.
    """
    peak = float((1 << bit_depth) - 1)
    if pixel_format == "rgb":
        return np.clip(np.stack([np.asarray(p, dtype=np.float64) for p in frame], axis=-1) / peak, 0.0, 1.0)
    if pixel_format not in ("yuv420", "yuv444"):
        raise DataError(f"unsupported pixel format {pixel_format!r}")
    y, cb, cr = (np.asarray(p, dtype=np.float64) for p in frame)
    if pixel_format == "yuv420":
        h, w = y.shape
        cb = np.repeat(np.repeat(cb, 2, axis=0), 2, axis=1)[:h, :w]
        cr = np.repeat(np.repeat(cr, 2, axis=0), 2, axis=1)[:h, :w]
    scale = float(1 << (bit_depth - 8))
    if color_range == "full":
        y = y / peak
        cb = (cb - (1 << (bit_depth - 1))) / peak
        cr = (cr - (1 << (bit_depth - 1))) / peak
    else:
        y = (y - 16.0 * scale) / (219.0 * scale)
        cb = (cb - 128.0 * scale) / (224.0 * scale)
        cr = (cr - 128.0 * scale) / (224.0 * scale)
    kr, kb = BT2020 if bit_depth > 8 else BT709
    kg = 1.0 - kr - kb
    r = y + 2.0 * (1.0 - kr) * cr
    b = y + 2.0 * (1.0 - kb) * cb
    g = (y - kr * r - kb * b) / kg
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def rgb_to_yuv(rgb, bit_depth=8, pixel_format="yuv420"):
    """Encode an (H, W, 3) RGB frame in [0, 1] as limited-range planar YUV."""
    kr, kb = BT2020 if bit_depth > 8 else BT709
    kg = 1.0 - kr - kb
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = kr * r + kg * g + kb * b
    cb = (b - y) / (2.0 * (1.0 - kb))
    cr = (r - y) / (2.0 * (1.0 - kr))
    if pixel_format == "yuv420":
        h, w = y.shape
        ph, pw = (-h) % 2, (-w) % 2

        def pool(c):
            c = np.pad(c, ((0, ph), (0, pw)), mode="edge")
            return 0.25 * (c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2])
        cb, cr = pool(cb), pool(cr)
    scale = float(1 << (bit_depth - 8))
    peak = (1 << bit_depth) - 1
    planes = (16.0 * scale + 219.0 * scale * y, 128.0 * scale + 224.0 * scale * cb,
              128.0 * scale + 224.0 * scale * cr)
    return tuple(np.clip(np.rint(p), 0, peak).astype(np.uint16) for p in planes)


# bicubic resampling

def cubic_kernel(t, a=-0.5):
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def resize_matrix(n_in, n_out, a=-0.5):
    """(n_out, n_in) matrix applying the 4-tap cubic with edge clamping."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for tap in range(-1, 3):
        idx = np.clip(base + tap, 0, n_in - 1)
        np.add.at(mat, (rows, idx), cubic_kernel(frac - tap, a))
    return mat


def bicubic_resize(frame, out_h, out_w, a=-0.5):
    """Resize an (H, W, C) frame with a = -0.5 cubic convolution, half-pixel centres."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape[:2]
    if (h, w) == (out_h, out_w):
        return frame.copy()
    wy = resize_matrix(h, out_h, a)
    wx = resize_matrix(w, out_w, a)
    out = np.einsum("ij,jkc,lk->ilc", wy, frame, wx, optimize=True)
    return np.clip(out, 0.0, 1.0)


def preprocess(video, height=384, width=384):
    """Sample one frame per second, convert to RGB and resize to ``height x width``."""
    indices = temporal_sample(video.frame_count, video.frame_rate)
    frames = []
    for idx in indices:
        rgb = to_rgb(video.frames[idx], video.bit_depth, video.pixel_format, video.color_range)
        frames.append(bicubic_resize(rgb, height, width))
    return SampledClip(frames=frames, source_indices=indices)


def load_clip(path, height=384, width=384):
    return preprocess(decode(path), height, width)


def paired_clips(ref_path, dist_path, height=384, width=384):
    """Preprocess a reference/distorted pair, enforcing identical sampling."""
    ref, dist = decode(ref_path), decode(dist_path)
    if ref.frame_rate != dist.frame_rate or ref.frame_count != dist.frame_count:
        raise DataError(f"reference {ref_path} ({ref.frame_count} @ {ref.frame_rate}) and distorted "
                        f"{dist_path} ({dist.frame_count} @ {dist.frame_rate}) are not frame-aligned")
    if (ref.width, ref.height) != (dist.width, dist.height):
        log.warning("reference %s is %dx%d but distorted %s is %dx%d; both resized to %dx%d",
                    ref_path, ref.width, ref.height, dist_path, dist.width, dist.height, width, height)
    return preprocess(ref, height, width), preprocess(dist, height, width)
