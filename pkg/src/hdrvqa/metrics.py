"""SRCC / KRCC / PLCC / RMSE between predicted and subjective scores."""
import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .datasetio import ClipStore
from .errors import VQAError


class UndefinedCorrelation(VQAError, ValueError):
    """A correlation was requested for a constant vector."""


@dataclass
class MetricsReport:
    srcc: float
    krcc: float
    plcc: float
    rmse: float
    n: int
    reason: str = None
    logistic: bool = False

    def to_dict(self):
        return asdict(self)


def _pair(pred, mos):
    p = np.asarray(pred, dtype=np.float64).ravel()
    m = np.asarray(mos, dtype=np.float64).ravel()
    if p.shape != m.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {m.size} scores")
    if p.size < 2:
        raise ValueError("need at least 2 samples")
    return p, m


def _pearson(x, y):
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(xc, xc), np.dot(yc, yc)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelation("correlation undefined for a constant vector")
    return float(np.clip(np.dot(xc, yc) / math.sqrt(sxx * syy), -1.0, 1.0))


def rankdata(x):
    """1-based ranks; ties share the average of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srcc(pred, mos):
    p, m = _pair(pred, mos)
    return _pearson(rankdata(p), rankdata(m))


def krcc(pred, mos):
    """Kendall tau-b from exact integer pair counts."""
    p, m = _pair(pred, mos)
    sp = np.sign(p[:, None] - p[None, :]).astype(np.int64)
    sm = np.sign(m[:, None] - m[None, :]).astype(np.int64)
    iu = np.triu_indices(p.size, 1)
    sp, sm = sp[iu], sm[iu]
    s = int(np.sum(sp * sm))
    n_p = int(np.count_nonzero(sp))
    n_m = int(np.count_nonzero(sm))
    if n_p == 0 or n_m == 0:
        raise UndefinedCorrelation("Kendall tau undefined for a constant vector")
    return s / math.sqrt(n_p * n_m)


def plcc(pred, mos):
    p, m = _pair(pred, mos)
    return _pearson(p, m)


def rmse(pred, mos):
    p, m = _pair(pred, mos)
    return float(np.sqrt(np.mean((p - m) ** 2)))


def logistic4(x, b1, b2, b3, b4):
    return (b1 - b2) / (1.0 + np.exp(-(x - b3) / np.abs(b4))) + b2


def fit_logistic(pred, mos):
    """Map predictions onto the MOS scale with a monotonic 4-parameter logistic."""
    from scipy.optimize import curve_fit

    p, m = _pair(pred, mos)
    init = [m.max(), m.min(), float(np.mean(p)), float(np.std(p)) or 1.0]
    params, _ = curve_fit(logistic4, p, m, p0=init, maxfev=20000)
    return logistic4(p, *params)


def compute_report(pred, mos, logistic=False):
    """All four criteria; undefined correlations yield ``None`` fields and a reason."""
    p, m = _pair(pred, mos)
    try:
        s, k = srcc(p, m), krcc(p, m)
        mapped = fit_logistic(p, m) if logistic else p
        return MetricsReport(s, k, plcc(mapped, m), rmse(mapped, m), int(p.size), logistic=logistic)
    except UndefinedCorrelation as exc:
        return MetricsReport(None, None, None, rmse(p, m), int(p.size), reason=str(exc), logistic=logistic)


def predict(model, manifest, records, store=None, jobs=1, head=None):
    """Video-level predictions for ``records`` (order preserved)."""
    store = store or ClipStore()
    items = store.items(manifest, records, model.kind)

    def one(item):
        return model.score_video(item[0], item[1], head).video_score

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, items))
    return [one(it) for it in items]


def evaluate(model, manifest, split="val", store=None, jobs=1, logistic=False, head=None):
    """Score every video of ``split`` and compare against MOS; returns ``(report, rows)``."""
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} of {manifest.dataset_id!r} is empty")
    if model.kind == "FR":
        manifest.require_fr()
    preds = predict(model, manifest, records, store, jobs, head)
    rows = [(r.video, p, r.mos) for r, p in zip(records, preds)]
    return compute_report(preds, [r.mos for r in records], logistic), rows


def export_predictions(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["video", "prediction", "mos"])
        for video, pred, mos in rows:
            writer.writerow([video, repr(float(pred)), repr(float(mos))])
