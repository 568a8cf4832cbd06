"""PLCC-loss training: single-dataset epochs, FR transfer learning and IMDT for NR.

Every optimizer step consumes one batch of videos: all frames are pushed
through the model, frame scores are averaged per video, and the batch's
video scores are correlated with their MOS labels.
"""
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .datasetio import ClipStore
from .errors import ConfigError, DataError, NumericError
from .model import QualityModel
from .rng import substream

log = logging.getLogger(__name__)

CONSTANT_PRED_STD = 1e-12
GUARD_OP = "plcc_constant_guard"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 6
    epochs: int = 30
    seed: int = 0
    pretrain_epochs: int = 10
    finetune_epochs: int = 30
    frame_size: int = 384
    freeze_backbone_finetune: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for a correlation loss, got {self.batch_size}")
        for name in ("epochs", "pretrain_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @classmethod
    def for_kind(cls, kind, **overrides):
        base = {"learning_rate": 1e-4 if kind == "FR" else 1e-5}
        base.update(overrides)
        return cls(**base)


@dataclass
class IMDTSchedule:
    dataset_sizes: list
    e_min: int = 10
    loops: int = 3

    def __post_init__(self):
        if not self.dataset_sizes or any(n < 1 for n in self.dataset_sizes):
            raise ConfigError(f"dataset sizes must be positive, got {self.dataset_sizes}")
        if self.e_min < 1 or self.loops < 1:
            raise ConfigError("e_min and loops must be >= 1")

    @property
    def epochs_per_dataset(self):
        n_max = max(self.dataset_sizes)
        return [max(n_max // n, self.e_min) for n in self.dataset_sizes]

    @property
    def epochs_per_loop(self):
        return sum(self.epochs_per_dataset)


@dataclass
class TrainState:
    model: QualityModel
    optimizer: dc.Adam = field(default_factory=dc.Adam)
    loop: int = 0
    epoch: int = 0
    steps: int = 0
    logs: list = field(default_factory=list)
    rngs: dict = field(default_factory=dict)

    def shuffle_rng(self, seed, name):
        """Persistent shuffle stream per (stage, dataset) so loops do not replay permutations."""
        if name not in self.rngs:
            self.rngs[name] = substream(seed, f"shuffle:{name}")
        return self.rngs[name]


def plcc_loss(pred, labels):
    """(1 - PLCC(pred, labels)) / 2 as a differentiable scalar.

    Near-constant predictions make the correlation undefined; the loss is then
    0.5 with no gradient, and the returned tensor's ``op`` is ``GUARD_OP``.
    """
    pred = dc._wrap(pred)
    y = np.asarray(labels, dtype=np.float64)
    if pred.ndim != 1 or y.ndim != 1 or pred.shape != y.shape:
        raise ConfigError(f"predictions {pred.shape} and labels {y.shape} must be equal-length vectors")
    if y.shape[0] < 2:
        raise ConfigError("PLCC needs at least 2 samples")
    yc = y - y.mean()
    syy = float(np.dot(yc, yc))
    if not syy > 0:
        raise ConfigError("labels are constant within the batch; correlation undefined")
    if np.std(pred.data) < CONSTANT_PRED_STD:
        return dc.Tensor(0.5, op=GUARD_OP)
    pc = dc.sub(pred, dc.mean(pred))
    spy = dc.sum_(dc.mul(pc, yc))
    spp = dc.sum_(dc.mul(pc, pc))
    r = dc.div(spy, dc.sqrt(dc.mul(spp, syy)))
    return dc.div(dc.sub(1.0, r), 2.0)


def _batches(order, batch_size):
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def train_epoch(state, manifest, records, config, head=None, trainable=None, rng=None, store=None,
                context=None):
    """One pass over ``records``; returns the epoch log entry."""
    model = state.model
    head = head or model.default_head
    if len(records) < config.batch_size:
        raise DataError(f"dataset {manifest.dataset_id!r} has {len(records)} training videos, "
                        f"fewer than batch size {config.batch_size}")
    if trainable is None:
        trainable = model.backbone_names() + model.head_names(head)
    rng = rng or substream(config.seed, f"shuffle:{manifest.dataset_id}")
    store = store or ClipStore(config.frame_size)
    order = rng.permutation(len(records))
    losses, degenerate = [], 0
    for b, idx in enumerate(_batches(order, config.batch_size)):
        batch = [records[i] for i in idx]
        items = store.items(manifest, batch, model.kind)
        labels = np.array([r.mos for r in batch])

        def fn(params, items=items, labels=labels):
            return plcc_loss(model.video_scores_t(params, items, head), labels)

        graph = dc.Graph(fn, model.params, trainable)
        loss = graph.forward()
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} in epoch {state.epoch}, batch {b} "
                               f"({[r.video for r in batch]})")
        losses.append(value)
        if loss.op == GUARD_OP:
            degenerate += 1
            continue
        grads = graph.backward()
        try:
            state.optimizer.step(model.params, grads, config.learning_rate)
        except NumericError as exc:
            raise NumericError(f"{exc}; epoch {state.epoch}, batch {b}, videos {[r.video for r in batch]}") \
                from None
        state.steps += 1
    entry = dict(context or {})
    entry.update({"dataset_id": manifest.dataset_id, "epoch": state.epoch,
                  "mean_loss": float(np.mean(losses)) if losses else None,
                  "batch_losses": losses, "degenerate_batches": degenerate})
    state.logs.append(entry)
    state.epoch += 1
    log.info("%s epoch %d: mean loss %.6f", manifest.dataset_id, entry["epoch"], entry["mean_loss"] or 0.0)
    return entry


def train_epochs(state, manifest, config, epochs, head=None, trainable=None, context=None, store=None,
                 on_epoch=None):
    records = manifest.split("train")
    rng = state.shuffle_rng(config.seed, f"{(context or {}).get('stage', 'train')}:{manifest.dataset_id}")
    store = store or ClipStore(config.frame_size)
    for e in range(epochs):
        ctx = dict(context or {}, stage_epoch=e)
        entry = train_epoch(state, manifest, records, config, head, trainable, rng, store, ctx)
        if on_epoch is not None:
            on_epoch(state, entry)
    return state


def transfer_train_fr(pretrain, finetune, config, model=None, backbone_config=None, sim_config=None,
                      on_epoch=None, store=None):
    """Pretrain on one FR dataset, then fine-tune all parameters on another.

    The optimizer state is reset between the two stages.  Returns the final
    :class:`TrainState`; its ``model`` is the checkpoint to save.
    """
    for m in (pretrain, finetune):
        if m is not None:
            m.require_fr()
    if model is None:
        model = QualityModel.create("FR", backbone_config, sim_config, seed=config.seed)
    elif model.kind != "FR":
        raise ConfigError(f"cannot FR-train a {model.kind} model")
    store = store or ClipStore(config.frame_size)
    state = TrainState(model)
    if pretrain is not None and config.pretrain_epochs:
        train_epochs(state, pretrain, config, config.pretrain_epochs, context={"stage": "pretrain"},
                     store=store, on_epoch=on_epoch)
    state.optimizer = dc.Adam()
    if finetune is not None and config.finetune_epochs:
        train_epochs(state, finetune, config, config.finetune_epochs, context={"stage": "finetune"},
                     store=store, on_epoch=on_epoch)
    return state


def build_schedule(manifests, config, e_min=10, loops=3):
    sizes = []
    for m in manifests:
        n = len(m.split("train"))
        if n < config.batch_size:
            raise DataError(f"dataset {m.dataset_id!r} has {n} training videos, fewer than batch size "
                            f"{config.batch_size}")
        sizes.append(n)
    return IMDTSchedule(sizes, e_min, loops)


def imdt_train_nr(manifests, config, target=None, schedule=None, model=None, backbone_config=None,
                  on_epoch=None, store=None):
    """Iterative mixed-dataset training of an NR model, then fine-tuning on ``target``.

    Each loop visits the datasets in the given order; dataset ``i`` trains for
    ``E_i`` epochs updating the shared backbone and head ``i`` only.
    """
    if not manifests:
        raise ConfigError("IMDT needs at least one dataset")
    ids = [m.dataset_id for m in manifests]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"dataset ids must be unique, got {ids}")
    target = target or ids[-1]
    if target not in ids:
        raise ConfigError(f"target {target!r} is not among {ids}")
    schedule = schedule or build_schedule(manifests, config)
    if len(schedule.dataset_sizes) != len(manifests):
        raise ConfigError("schedule and manifest counts differ")
    if model is None:
        model = QualityModel.create("NR", backbone_config, heads=tuple(ids), seed=config.seed)
    elif model.kind != "NR":
        raise ConfigError(f"cannot NR-train a {model.kind} model")
    for ds in ids:
        if ds not in model.heads:
            model.add_head(ds, config.seed)
    model.default_head = target
    store = store or ClipStore(config.frame_size)
    state = TrainState(model)
    backbone = model.backbone_names()
    for loop in range(schedule.loops):
        state.loop = loop
        for m, n_epochs in zip(manifests, schedule.epochs_per_dataset):
            train_epochs(state, m, config, n_epochs, head=m.dataset_id,
                         trainable=backbone + model.head_names(m.dataset_id),
                         context={"stage": "imdt", "loop": loop}, store=store, on_epoch=on_epoch)
    state.optimizer = dc.Adam()
    target_manifest = manifests[ids.index(target)]
    trainable = ([] if config.freeze_backbone_finetune else backbone) + model.head_names(target)
    train_epochs(state, target_manifest, config, config.finetune_epochs, head=target, trainable=trainable,
                 context={"stage": "finetune", "loop": schedule.loops}, store=store, on_epoch=on_epoch)
    return state


def write_log(path, entries):
    """Epoch log as JSON lines."""
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
