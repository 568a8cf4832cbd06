"""Quality-aware feature vectors built from feature pyramids.

FR: per-stage, per-channel texture (mean) and structure (covariance)
similarity between reference and distorted maps, concatenated stage-major
with the texture block before the structure block.
NR: per-channel global mean of the final stage.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ShapeError


@dataclass
class SimilarityConfig:
    c1: float = 1e-6
    c2: float = 1e-6

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError(f"similarity constants must be positive, got c1={self.c1}, c2={self.c2}")

    def to_dict(self):
        return {"c1": self.c1, "c2": self.c2}


@dataclass
class ChannelStats:
    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray = None


@dataclass
class QualityFeatureVector:
    values: np.ndarray
    kind: str
    layout: list = field(default_factory=list)

    def __len__(self):
        return len(self.values)


def channel_stats(fmap, other=None):
    """Population mean and variance per channel of a (C, h, w) map.

    With ``other`` the covariance between the two maps is included and the
    returned pair holds stats for ``fmap`` and ``other`` respectively.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3 or fmap.shape[1] * fmap.shape[2] < 1:
        raise ShapeError(f"expected non-empty C x h x w map, got {fmap.shape}", node="channel_stats")
    t = dc.Tensor(fmap)
    mu = dc.spatial_mean(t)
    var = dc.spatial_var(t, mu)
    if other is None:
        return ChannelStats(mu.data, var.data)
    other = np.asarray(other, dtype=np.float64)
    if other.shape != fmap.shape:
        raise ShapeError(f"paired maps differ: {fmap.shape} vs {other.shape}", node="channel_stats")
    o = dc.Tensor(other)
    mu_o = dc.spatial_mean(o)
    cov = dc.spatial_cov(t, o, mu, mu_o).data
    return (ChannelStats(mu.data, var.data, cov),
            ChannelStats(mu_o.data, dc.spatial_var(o, mu_o).data, cov))


def _plain(out, *inputs):
    return out if any(isinstance(x, dc.Tensor) for x in inputs) else out.data


def texture_similarity(mu_r, mu_d, c1):
    """(2 mu_r mu_d + c1) / (mu_r^2 + mu_d^2 + c1).

    Accepts arrays (returns an array) or tensors (returns a tensor).
    """
    num = dc.add(dc.mul(dc.mul(2.0, mu_r), mu_d), c1)
    den = dc.add(dc.add(dc.mul(mu_r, mu_r), dc.mul(mu_d, mu_d)), c1)
    return _plain(dc.div(num, den), mu_r, mu_d)


def structure_similarity(var_r, var_d, cov_rd, c2):
    """(2 cov + c2) / (var_r + var_d + c2)."""
    num = dc.add(dc.mul(2.0, cov_rd), c2)
    den = dc.add(dc.add(var_r, var_d), c2)
    return _plain(dc.div(num, den), var_r, var_d, cov_rd)


def fr_features(ref_stages, dist_stages, cfg):
    """Differentiable FR features for batched stage maps (N, C, h, w) -> (N, 2 sum C)."""
    if len(ref_stages) != len(dist_stages):
        raise ShapeError(f"{len(ref_stages)} reference vs {len(dist_stages)} distorted stages", node="fr_feature")
    blocks = []
    for s, (r, d) in enumerate(zip(ref_stages, dist_stages)):
        r, d = dc._wrap(r), dc._wrap(d)
        if r.shape != d.shape:
            raise ShapeError(f"stage {s}: {r.shape} vs {d.shape}", node="fr_feature")
        mu_r, mu_d = dc.spatial_mean(r), dc.spatial_mean(d)
        var_r, var_d = dc.spatial_var(r, mu_r), dc.spatial_var(d, mu_d)
        cov = dc.spatial_cov(r, d, mu_r, mu_d)
        blocks.append(texture_similarity(mu_r, mu_d, cfg.c1))
        blocks.append(structure_similarity(var_r, var_d, cov, cfg.c2))
    return dc.concat(blocks, axis=-1)


def nr_features(stages):
    """Differentiable NR features: global mean of the last stage, (N, C_last)."""
    return dc.spatial_mean(stages[-1])


def fr_layout(channels_per_stage):
    return [(s, kind, c) for s, n in enumerate(channels_per_stage) for kind in ("T", "S") for c in range(n)]


def fr_feature(ref_pyr, dist_pyr, cfg=None):
    cfg = cfg or SimilarityConfig()
    if len(ref_pyr.stages) != len(dist_pyr.stages):
        raise ShapeError("pyramids have different stage counts", node="fr_feature")
    ref = [dc.Tensor(m[None]) for m in ref_pyr.stages]
    dist = [dc.Tensor(m[None]) for m in dist_pyr.stages]
    values = fr_features(ref, dist, cfg).data[0]
    return QualityFeatureVector(values, "FR", fr_layout([m.shape[0] for m in ref_pyr.stages]))


def nr_feature(pyr):
    if not pyr.stages:
        raise ShapeError("empty pyramid", node="nr_feature")
    last = pyr.stages[-1]
    values = nr_features([dc.Tensor(last[None])]).data[0]
    layout = [(len(pyr.stages) - 1, "M", c) for c in range(last.shape[0])]
    return QualityFeatureVector(values, "NR", layout)


def export_csv(path, vectors):
    """One row per frame; header derived from the first vector's layout."""
    if not vectors:
        raise ValueError("nothing to export")
    header = [f"s{s}_{kind}_c{c}" for s, kind, c in vectors[0].layout]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame"] + header)
        for i, vec in enumerate(vectors):
            if len(vec) != len(header):
                raise ShapeError(f"frame {i} has {len(vec)} values, header has {len(header)}", node="export_csv")
            writer.writerow([i] + [repr(float(v)) for v in vec.values])
