"""Dataset manifests, reference-grouped splits and a synthetic distortion set."""
import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, ParseError
from .rng import substream
from .videoio import decode, preprocess, rgb_to_yuv, write_y4m

HEADER = ["dataset_id", "video", "reference", "mos", "split"]
SPLITS = ("train", "val")


@dataclass(frozen=True)
class Record:
    video: str
    reference: str = None
    mos: float = 0.0
    split: str = "train"


@dataclass
class DatasetManifest:
    dataset_id: str
    records: list = field(default_factory=list)
    root: str = "."

    def __len__(self):
        return len(self.records)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    @property
    def is_fr(self):
        return bool(self.records) and all(r.reference for r in self.records)

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.normpath(os.path.join(self.root, path))

    def require_fr(self):
        missing = [r.video for r in self.records if not r.reference]
        if missing:
            raise DataError(f"dataset {self.dataset_id!r}: {len(missing)} record(s) lack a reference, "
                            f"e.g. {missing[0]}")
        return self


class ClipStore:
    """Memoised preprocessing of manifest videos at a fixed frame size."""

    def __init__(self, size=384):
        self.size = int(size)
        self._cache = {}

    def clip(self, path):
        clip = self._cache.get(path)
        if clip is None:
            clip = preprocess(decode(path), self.size, self.size)
            self._cache[path] = clip
        return clip

    def items(self, manifest, records, kind):
        """``[(dist_clip, ref_clip or None), ...]`` for the given records."""
        out = []
        for r in records:
            dist = self.clip(manifest.resolve(r.video))
            ref = None
            if kind == "FR":
                if not r.reference:
                    raise DataError(f"{r.video}: FR scoring needs a reference")
                ref = self.clip(manifest.resolve(r.reference))
                if ref.source_indices != dist.source_indices:
                    raise DataError(f"{r.video}: sampled frames {dist.source_indices} do not match "
                                    f"reference {ref.source_indices}")
            out.append((dist, ref))
        return out


def load_manifest(path):
    """Parse a manifest CSV (header ``dataset_id,video,reference,mos,split``)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty manifest") from None
        if [h.strip() for h in header] != HEADER:
            raise ParseError(f"{path}: header {header} != {HEADER}")
        ids, records, seen = set(), [], set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(HEADER):
                raise ParseError(f"{path}: row {lineno} has {len(row)} columns, expected {len(HEADER)}")
            ds, video, ref, mos_text, split = (c.strip() for c in row)
            try:
                mos = float(mos_text)
            except ValueError:
                raise ParseError(f"{path}: row {lineno}: mos {mos_text!r} is not numeric") from None
            if not math.isfinite(mos):
                raise ParseError(f"{path}: row {lineno}: mos must be finite")
            if split not in SPLITS:
                raise ParseError(f"{path}: row {lineno}: unknown split {split!r}")
            if video in seen:
                raise ParseError(f"{path}: row {lineno}: duplicate video {video!r}")
            seen.add(video)
            ids.add(ds)
            records.append(Record(video, ref or None, mos, split))
    if len(ids) > 1:
        raise DataError(f"{path}: manifest mixes dataset ids {sorted(ids)}")
    if not records:
        raise DataError(f"{path}: manifest has no records")
    manifest = DatasetManifest(ids.pop(), records, os.path.dirname(os.path.abspath(path)))
    if any(r.reference for r in records) and not manifest.is_fr:
        manifest.require_fr()
    return manifest


def save_manifest(path, manifest):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for r in manifest.records:
            writer.writerow([manifest.dataset_id, r.video, r.reference or "", repr(float(r.mos)), r.split])


def split_by_reference(records, ratio=0.8, seed=0):
    """Assign train/val so that all clips of one reference share a split."""
    refs = sorted({r.reference for r in records if r.reference})
    if any(not r.reference for r in records):
        raise DataError("every record needs a reference identifier to split by reference")
    if len(refs) < 2:
        raise DataError(f"need at least 2 distinct references, got {len(refs)}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    n_train = int(round(ratio * len(refs)))
    if 0.0 < ratio < 1.0:
        n_train = min(max(n_train, 1), len(refs) - 1)
    order = substream(seed, "split").permutation(len(refs))
    train = {refs[i] for i in order[:n_train]}
    return [replace(r, split="train" if r.reference in train else "val") for r in records]


# synthetic content

def _pink_texture(rng, height, width, slope=1.0):
    """Zero-mean random field with a 1/f^slope amplitude spectrum, unit std."""
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    f = np.sqrt(fy * fy + fx * fx)
    f[0, 0] = 1.0
    spectrum = (rng.normal(size=f.shape) + 1j * rng.normal(size=f.shape)) / f ** slope
    spectrum[0, 0] = 0.0
    tex = np.fft.irfft2(spectrum, s=(height, width))
    return tex / tex.std()


def _reference_frames(rng, n_frames, height, width):
    """Colour gradient + drifting 1/f texture + a moving checkerboard patch."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    u, v = xx / width, yy / height
    theta = rng.uniform(0, 2 * np.pi)
    ramp = u * np.cos(theta) + v * np.sin(theta)
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    c0, c1 = rng.uniform(0.25, 0.75, size=3), rng.uniform(0.25, 0.75, size=3)
    base = c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]
    # texture tile twice the frame size so it can drift without wrapping artefacts
    tex = _pink_texture(rng, 2 * height, 2 * width) * rng.uniform(0.10, 0.12)
    tint = rng.uniform(0.6, 1.0, size=3)
    drift = rng.uniform(-0.05, 0.05, size=2) * np.array([height, width])
    size = int(rng.integers(width // 5, width // 4 + 1))
    pos = rng.uniform(0, [height - size, width - size])
    vel = rng.uniform(-0.08, 0.08, size=2) * np.array([height, width])
    cell = max(size // int(rng.integers(2, 5)), 1)
    patch = ((np.arange(size)[:, None] // cell + np.arange(size)[None, :] // cell) % 2).astype(np.float64)
    frames = []
    for t in range(n_frames):
        oy, ox = (np.array([height, width]) // 2 + drift * t).astype(int) % [height, width]
        img = base + tex[oy:oy + height, ox:ox + width, None] * tint
        y0, x0 = ((pos + vel * t) % [height - size, width - size]).astype(int)
        img[y0:y0 + size, x0:x0 + size] = 0.15 + 0.7 * patch[..., None]
        frames.append(np.clip(img, 0.0, 1.0))
    return frames


def distort(frames, kind, severity, rng, blur_sigma=1.5, noise_sd=0.06):
    """Apply ``severity`` steps of Gaussian blur or additive noise; severity 0 is a no-op."""
    if severity == 0:
        return [f.copy() for f in frames]
    if kind == "blur":
        s = blur_sigma * severity
        return [np.clip(gaussian_filter(f, sigma=(s, s, 0), mode="nearest"), 0, 1) for f in frames]
    if kind == "noise":
        sd = noise_sd * severity
        return [np.clip(f + rng.normal(0.0, sd, size=f.shape), 0, 1) for f in frames]
    raise ValueError(f"unknown distortion {kind!r}")


def generate_synthetic(out_dir, n_refs=5, levels=4, seed=0, dataset_id="synthetic",
                       distortions=("blur", "noise"), width=128, height=128, n_frames=8, fps=4,
                       ratio=0.8, jitter=0.1, bit_depth=8, blur_sigma=1.5, noise_sd=0.06):
    """Write reference and distorted Y4M clips plus ``manifest.csv``.

    Severities run 0..levels-1; MOS = 5 - 4 * severity / (levels - 1) plus
    uniform jitter kept below half the gap between adjacent levels.
    """
    if n_refs < 2 or levels < 2:
        raise ValueError("need n_refs >= 2 and levels >= 2")
    os.makedirs(os.path.join(out_dir, "ref"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "dist"), exist_ok=True)
    max_sev = levels - 1
    amp = min(jitter, 0.45 * 4.0 / max_sev)
    jitter_rng = substream(seed, f"jitter:{dataset_id}")
    records = []
    for r in range(n_refs):
        content = _reference_frames(substream(seed, f"content:{dataset_id}:{r}"), n_frames, height, width)
        ref_rel = f"ref/{dataset_id}_ref{r:03d}.y4m"
        _write_rgb(os.path.join(out_dir, ref_rel), content, fps, bit_depth)
        for kind in distortions:
            for sev in range(levels):
                frames = distort(content, kind, sev, substream(seed, f"noise:{dataset_id}:{r}:{kind}:{sev}"),
                                 blur_sigma, noise_sd)
                rel = f"dist/{dataset_id}_ref{r:03d}_{kind}{sev}.y4m"
                _write_rgb(os.path.join(out_dir, rel), frames, fps, bit_depth)
                mos = 5.0 - 4.0 * sev / max_sev + float(jitter_rng.uniform(-amp, amp))
                records.append(Record(rel, ref_rel, mos, "train"))
    manifest = DatasetManifest(dataset_id, split_by_reference(records, ratio, seed),
                               os.path.abspath(out_dir))
    save_manifest(os.path.join(out_dir, "manifest.csv"), manifest)
    return manifest


def _write_rgb(path, frames, fps, bit_depth):
    h, w = frames[0].shape[:2]
    write_y4m(path, [rgb_to_yuv(f, bit_depth) for f in frames], w, h, fps, bit_depth, "yuv420")
