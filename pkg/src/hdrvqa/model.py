"""FR/NR quality models: backbone -> features -> two-layer MLP -> mean over frames."""
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig, forward_stages, init_params
from .errors import DataError, NumericError, ShapeError
from .features import SimilarityConfig, fr_features, nr_features
from .rng import substream

HIDDEN = 128
MODEL_FORMAT = "hdrvqa-model"
MODEL_VERSION = 1


@dataclass
class RegressorParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def in_dim(self):
        return self.w1.shape[0]


@dataclass
class VideoScore:
    frame_scores: list
    video_score: float

    def to_dict(self):
        return {"frame_scores": list(self.frame_scores), "video_score": self.video_score}


def init_regressor(in_dim, seed=0, name="default", hidden=HIDDEN):
    """Kaiming-uniform first layer; small uniform second layer; zero biases."""
    rng = substream(seed, f"init:head:{name}")
    b1 = np.sqrt(6.0 / in_dim)
    b2 = 1.0 / np.sqrt(hidden)
    return RegressorParams(w1=rng.uniform(-b1, b1, size=(in_dim, hidden)), b1=np.zeros(hidden),
                           w2=rng.uniform(-b2, b2, size=(hidden, 1)), b2=np.zeros(1))


def regress_t(x, w1, b1, w2, b2):
    """(N, D) features -> (N,) scores through affine -> relu -> affine."""
    hidden = dc.relu(dc.affine(x, w1, b1))
    out = dc.affine(hidden, w2, b2)
    return dc.reshape(out, (out.shape[0],))


def regress(feature, params):
    values = np.asarray(getattr(feature, "values", feature), dtype=np.float64)
    if values.ndim != 1 or values.shape[0] != params.in_dim:
        raise ShapeError(f"feature of length {values.shape} for regressor input {params.in_dim}", node="regress")
    return float(regress_t(values[None], params.w1, params.b1, params.w2, params.b2).data[0])


class QualityModel:
    """Backbone parameters plus one or more regression heads.

    Parameters live in a flat name -> array dict: ``backbone.s{i}.weight|bias``
    and ``head.{id}.w1|b1|w2|b2``.  FR models normally carry a single head;
    NR models trained on several datasets carry one head per dataset.
    """

    def __init__(self, kind, backbone_config=None, sim_config=None, params=None, heads=(), default_head=None,
                 info=None):
        if kind not in ("FR", "NR"):
            raise ValueError(f"model kind must be 'FR' or 'NR', got {kind!r}")
        self.kind = kind
        self.backbone_config = backbone_config or BackboneConfig()
        self.sim_config = sim_config or SimilarityConfig()
        self.params = dict(params or {})
        self.heads = list(heads)
        self.default_head = default_head if default_head is not None else (self.heads[0] if self.heads else None)
        # free-form JSON-safe metadata stored with the checkpoint (e.g. preprocessing size)
        self.info = dict(info or {})

    @classmethod
    def create(cls, kind, backbone_config=None, sim_config=None, heads=("default",), seed=0):
        model = cls(kind, backbone_config, sim_config)
        model.params.update(init_params(model.backbone_config, seed))
        for h in heads:
            model.add_head(h, seed)
        model.default_head = heads[0]
        return model

    @property
    def feature_dim(self):
        chans = self.backbone_config.channels_per_stage
        return 2 * sum(chans) if self.kind == "FR" else chans[-1]

    def add_head(self, head_id, seed=0):
        if head_id in self.heads:
            raise ValueError(f"head {head_id!r} already exists")
        reg = init_regressor(self.feature_dim, seed, head_id)
        for k in ("w1", "b1", "w2", "b2"):
            self.params[f"head.{head_id}.{k}"] = getattr(reg, k)
        self.heads.append(head_id)
        if self.default_head is None:
            self.default_head = head_id

    def head_names(self, head_id):
        return [f"head.{head_id}.{k}" for k in ("w1", "b1", "w2", "b2")]

    def backbone_names(self):
        return sorted(k for k in self.params if k.startswith("backbone."))

    def regressor(self, head_id=None):
        head_id = head_id or self.default_head
        if head_id not in self.heads:
            raise KeyError(f"unknown head {head_id!r}; model has {self.heads}")
        return RegressorParams(*(self.params[n] for n in self.head_names(head_id)))

    # differentiable path

    def frame_scores_t(self, params, dist_frames, ref_frames=None, head=None):
        """Per-frame scores for stacked frames (F, 3, H, W) using ``params`` tensors."""
        head = head or self.default_head
        if self.kind == "FR":
            if ref_frames is None:
                raise DataError("FR model needs reference frames")
            if ref_frames.shape != dist_frames.shape:
                raise ShapeError(f"reference frames {ref_frames.shape} vs distorted {dist_frames.shape}",
                                 node="score")
            n = dist_frames.shape[0]
            stages = forward_stages(np.concatenate([ref_frames, dist_frames]), params, self.backbone_config)
            feats = fr_features([s[:n] for s in stages], [s[n:] for s in stages], self.sim_config)
        else:
            feats = nr_features(forward_stages(dist_frames, params, self.backbone_config))
        return regress_t(feats, *(params[k] for k in self.head_names(head)))

    def video_scores_t(self, params, items, head=None):
        """Video-level scores (V,) for ``items`` = [(dist_clip, ref_clip or None), ...]."""
        dist = [d.array() for d, _ in items]
        ref = None
        if self.kind == "FR":
            for i, (d, r) in enumerate(items):
                if r is None or len(r) != len(d):
                    raise DataError(f"item {i}: reference clip missing or K mismatch")
            ref = [r.array() for _, r in items]
        counts = [a.shape[0] for a in dist]
        frames = self.frame_scores_t(params, np.concatenate(dist),
                                     np.concatenate(ref) if ref is not None else None, head)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        return dc.concat([dc.reshape(dc.mean(frames[int(a):int(b)]), (1,))
                          for a, b in zip(bounds[:-1], bounds[1:])])

    # inference

    def _stages(self, frames, chunk):
        params = {k: dc.Tensor(v) for k, v in self.params.items() if k.startswith("backbone.")}
        out = None
        for start in range(0, frames.shape[0], chunk):
            stages = [s.data for s in forward_stages(frames[start:start + chunk], params, self.backbone_config)]
            out = stages if out is None else [np.concatenate([a, b]) for a, b in zip(out, stages)]
        return out

    def frame_scores(self, dist_clip, ref_clip=None, head=None, chunk=8):
        head = head or self.default_head
        reg = self.regressor(head)
        dist = dist_clip.array()
        if self.kind == "FR":
            if ref_clip is None:
                raise DataError("FR scoring requires a reference clip")
            if len(ref_clip) != len(dist_clip):
                raise DataError(f"reference has K={len(ref_clip)} frames, distorted has K={len(dist_clip)}")
            ref = ref_clip.array()
            if ref.shape != dist.shape:
                raise DataError(f"reference frames {ref.shape[2:]} vs distorted {dist.shape[2:]}")
            feats = fr_features(self._stages(ref, chunk), self._stages(dist, chunk), self.sim_config)
        else:
            feats = nr_features(self._stages(dist, chunk))
        scores = regress_t(feats, reg.w1, reg.b1, reg.w2, reg.b2).data
        bad = np.flatnonzero(~np.isfinite(scores))
        if bad.size:
            raise NumericError(f"non-finite score for frame(s) {bad.tolist()} "
                               f"(source indices {[dist_clip.source_indices[i] for i in bad]})")
        return scores

    def score_video(self, dist_clip, ref_clip=None, head=None):
        scores = self.frame_scores(dist_clip, ref_clip, head)
        return VideoScore([float(s) for s in scores], float(np.mean(scores)))

    # persistence

    def meta(self):
        return {"format": MODEL_FORMAT, "version": MODEL_VERSION, "kind": self.kind,
                "backbone": self.backbone_config.to_dict(), "similarity": self.sim_config.to_dict(),
                "heads": list(self.heads), "default_head": self.default_head, "info": dict(self.info)}

    def save(self, path):
        dc.save_checkpoint(path, self.params, self.meta())

    @classmethod
    def load(cls, path):
        tensors, meta = dc.load_checkpoint(path)
        if meta.get("format") != MODEL_FORMAT:
            raise DataError(f"{path} is not a model checkpoint (format={meta.get('format')!r})")
        model = cls(meta["kind"], BackboneConfig(**meta["backbone"]), SimilarityConfig(**meta["similarity"]),
                    params={k: np.array(v) for k, v in tensors.items()}, heads=meta["heads"],
                    default_head=meta["default_head"], info=meta.get("info"))
        missing = [n for n in init_params(model.backbone_config) if n not in model.params]
        for h in model.heads:
            missing += [n for n in model.head_names(h) if n not in model.params]
        if missing:
            raise DataError(f"checkpoint {path} lacks parameters {missing}")
        return model

    def copy(self):
        return QualityModel(self.kind, self.backbone_config, self.sim_config,
                            {k: v.copy() for k, v in self.params.items()}, self.heads, self.default_head, self.info)
