"""``vqa`` command line: preprocess, extract, train-fr, train-nr, score, eval, gen-synthetic.

Exit status: 0 success, 1 usage error, 2 data/parse/config error, 3 numeric failure.
Settings resolve as defaults < TOML config file < command-line flags, and every
run writes a reproducibility record (resolved settings with provenance, seed and
toolkit version) next to its outputs as ``run_record_<command>.json``.
"""
import argparse
import json
import logging
import os
import sys
from copy import deepcopy
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .backbone import BackboneConfig, export_pyramid, extract, init_params
from .datasetio import ClipStore, generate_synthetic, load_manifest
from .errors import ConfigError, NumericError, VQAError
from .features import SimilarityConfig
from .metrics import evaluate, export_predictions
from .model import QualityModel
from .training import TrainConfig, build_schedule, imdt_train_nr, transfer_train_fr, write_log
from .videoio import decode, load_clip, preprocess

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("hdrvqa")

RECORD_NAME = "run_record_{command}.json"
SCHEMA_VERSION = 1

DEFAULTS = {
    "run": {"seed": 0},
    "backbone": BackboneConfig().to_dict(),
    "similarity": SimilarityConfig().to_dict(),
    "train": {"learning_rate": None, "batch_size": 6, "pretrain_epochs": 10, "finetune_epochs": 30,
              "freeze_backbone_finetune": False},
    "imdt": {"e_min": 10, "loops": 3},
    "preprocess": {"size": 384},
}
# kind-dependent default learning rates
DEFAULT_LR = {"FR": 1e-4, "NR": 1e-5}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    """Merged settings; ``sources`` maps ``section.key`` to default | file | flag."""
    values: dict = field(default_factory=lambda: deepcopy(DEFAULTS))
    sources: dict = field(default_factory=dict)

    def __post_init__(self):
        for sec, entries in self.values.items():
            for key in entries:
                self.sources.setdefault(f"{sec}.{key}", "default")

    @classmethod
    def load(cls, path=None):
        cfg = cls()
        if path:
            try:
                with open(path, "rb") as fh:
                    doc = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
            for sec, entries in doc.items():
                if sec not in cfg.values or not isinstance(entries, dict):
                    raise ConfigError(f"{path}: unknown section [{sec}]; expected one of {sorted(cfg.values)}")
                for key, value in entries.items():
                    if key not in cfg.values[sec]:
                        raise ConfigError(f"{path}: unknown key {key!r} in [{sec}]")
                    cfg.set(sec, key, value, "file")
        return cfg

    def set(self, section, key, value, source="flag"):
        if value is None:
            return
        self.values[section][key] = value
        self.sources[f"{section}.{key}"] = source

    def get(self, section, key):
        return self.values[section][key]

    @property
    def seed(self):
        return int(self.get("run", "seed"))

    def backbone(self):
        return BackboneConfig(**self.values["backbone"])

    def similarity(self):
        return SimilarityConfig(**self.values["similarity"])

    def train(self, kind):
        t = self.values["train"]
        if t["learning_rate"] is None:
            self.values["train"]["learning_rate"] = DEFAULT_LR[kind]
        return TrainConfig(learning_rate=float(t["learning_rate"]), batch_size=int(t["batch_size"]),
                           seed=self.seed, pretrain_epochs=int(t["pretrain_epochs"]),
                           finetune_epochs=int(t["finetune_epochs"]),
                           frame_size=int(self.get("preprocess", "size")),
                           freeze_backbone_finetune=bool(t["freeze_backbone_finetune"]))

    def record(self, command, **extra):
        resolved = {sec: {k: {"value": v, "source": self.sources[f"{sec}.{k}"]} for k, v in entries.items()}
                    for sec, entries in self.values.items()}
        rec = {"schema": "hdrvqa-run-record", "version": SCHEMA_VERSION, "toolkit_version": __version__,
               "command": command, "seed": self.seed, "config": resolved}
        rec.update(extra)
        return rec


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_record(out_dir, cfg, command, **extra):
    path = os.path.join(out_dir, RECORD_NAME.format(command=command.replace("-", "_")))
    write_json(path, cfg.record(command, **extra))
    return path


def _config_from_args(args):
    cfg = RunConfig.load(getattr(args, "config", None))
    for dest, (sec, key) in FLAG_MAP.items():
        cfg.set(sec, key, getattr(args, dest, None), "flag")
    return cfg


FLAG_MAP = {
    "seed": ("run", "seed"),
    "size": ("preprocess", "size"),
    "lr": ("train", "learning_rate"),
    "batch_size": ("train", "batch_size"),
    "pretrain_epochs": ("train", "pretrain_epochs"),
    "finetune_epochs": ("train", "finetune_epochs"),
    "freeze_backbone": ("train", "freeze_backbone_finetune"),
    "e_min": ("imdt", "e_min"),
    "loops": ("imdt", "loops"),
}


# subcommands

def cmd_preprocess(args):
    cfg = _config_from_args(args)
    size = int(cfg.get("preprocess", "size"))
    video = decode(args.input)
    clip = preprocess(video, size, size)
    os.makedirs(args.out, exist_ok=True)
    files = []
    for i, frame in enumerate(clip.frames):
        name = f"frame_{i:04d}.f64"
        np.ascontiguousarray(frame, dtype="<f8").tofile(os.path.join(args.out, name))
        files.append(name)
    write_json(os.path.join(args.out, "index.json"), {
        "schema": "hdrvqa-frames", "version": SCHEMA_VERSION, "source": os.path.abspath(args.input),
        "height": size, "width": size, "channels": 3, "layout": "HWC", "dtype": "<f8",
        "frame_rate": str(video.frame_rate), "source_indices": list(clip.source_indices), "files": files})
    write_record(args.out, cfg, "preprocess", input=os.path.abspath(args.input))
    print(json.dumps({"frames": len(files), "out": args.out}))


def read_frames(frames_dir):
    with open(os.path.join(frames_dir, "index.json")) as fh:
        index = json.load(fh)
    shape = (index["height"], index["width"], index["channels"])
    frames = []
    for name in index["files"]:
        data = np.fromfile(os.path.join(frames_dir, name), dtype="<f8")
        if data.size != np.prod(shape):
            raise ConfigError(f"{name}: {data.size} values, expected {int(np.prod(shape))}")
        frames.append(data.reshape(shape))
    return index, frames


def cmd_extract(args):
    cfg = _config_from_args(args)
    if args.model:
        model = QualityModel.load(args.model)
        bb_config, params = model.backbone_config, {k: v for k, v in model.params.items()
                                                    if k.startswith("backbone.")}
    else:
        bb_config = cfg.backbone()
        params = init_params(bb_config, cfg.seed)
    index, frames = read_frames(args.frames)
    os.makedirs(args.out, exist_ok=True)
    files = []
    for i, frame in enumerate(frames):
        name = f"pyramid_{i:04d}.pyr"
        export_pyramid(os.path.join(args.out, name), extract(frame, params, bb_config))
        files.append(name)
    write_json(os.path.join(args.out, "index.json"), {
        "schema": "hdrvqa-pyramids", "version": SCHEMA_VERSION, "frames": os.path.abspath(args.frames),
        "backbone": bb_config.to_dict(), "source_indices": index.get("source_indices"), "files": files})
    write_record(args.out, cfg, "extract", frames=os.path.abspath(args.frames),
                 model=os.path.abspath(args.model) if args.model else None)
    print(json.dumps({"pyramids": len(files), "out": args.out}))


def _finish_training(args, cfg, state, command, kind, inputs):
    os.makedirs(args.out, exist_ok=True)
    model = state.model
    model.info = {"preprocess_size": int(cfg.get("preprocess", "size")), "seed": cfg.seed}
    ckpt = os.path.join(args.out, "model.ckpt")
    model.save(ckpt)
    write_log(os.path.join(args.out, "train_log.jsonl"), state.logs)
    write_record(args.out, cfg, command, kind=kind, inputs=inputs)
    print(json.dumps({"model": ckpt, "epochs": len(state.logs), "steps": state.steps}))


def cmd_train_fr(args):
    cfg = _config_from_args(args)
    config = cfg.train("FR")
    pre = load_manifest(args.pretrain) if args.pretrain else None
    fine = load_manifest(args.finetune)
    state = transfer_train_fr(pre, fine, config, backbone_config=cfg.backbone(), sim_config=cfg.similarity(),
                              store=ClipStore(config.frame_size))
    _finish_training(args, cfg, state, "train-fr", "FR",
                     {"pretrain": args.pretrain and os.path.abspath(args.pretrain),
                      "finetune": os.path.abspath(args.finetune)})


def cmd_train_nr(args):
    cfg = _config_from_args(args)
    config = cfg.train("NR")
    manifests = [load_manifest(p) for p in args.datasets]
    schedule = build_schedule(manifests, config, int(cfg.get("imdt", "e_min")), int(cfg.get("imdt", "loops")))
    state = imdt_train_nr(manifests, config, target=args.target, schedule=schedule,
                          backbone_config=cfg.backbone(), store=ClipStore(config.frame_size))
    _finish_training(args, cfg, state, "train-nr", "NR",
                     {"datasets": [os.path.abspath(p) for p in args.datasets], "target": args.target,
                      "epochs_per_dataset": schedule.epochs_per_dataset})


def _model_size(cfg, model):
    # a checkpoint remembers the size it was trained at unless overridden
    if cfg.sources["preprocess.size"] == "default" and "preprocess_size" in model.info:
        cfg.set("preprocess", "size", int(model.info["preprocess_size"]), "file")
    return int(cfg.get("preprocess", "size"))


def cmd_score(args):
    if args.mode == "fr" and not args.ref:
        raise UsageError("--ref is required with --mode fr")
    cfg = _config_from_args(args)
    model = QualityModel.load(args.model)
    if model.kind.lower() != args.mode:
        raise ConfigError(f"model {args.model} is {model.kind}, but --mode {args.mode} was requested")
    size = _model_size(cfg, model)
    dist = load_clip(args.dist, size, size)
    ref = load_clip(args.ref, size, size) if args.mode == "fr" else None
    result = model.score_video(dist, ref, args.head)
    out = {"schema": "hdrvqa-score", "version": SCHEMA_VERSION, "mode": args.mode, "dist": args.dist,
           "ref": args.ref, "source_indices": list(dist.source_indices), **result.to_dict()}
    text = json.dumps(out, indent=2)
    print(text)
    if args.out:
        out_dir = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(out_dir, exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        write_record(out_dir, cfg, "score", model=os.path.abspath(args.model))


def cmd_eval(args):
    cfg = _config_from_args(args)
    model = QualityModel.load(args.model)
    size = _model_size(cfg, model)
    manifest = load_manifest(args.manifest)
    report, rows = evaluate(model, manifest, args.split, ClipStore(size), args.jobs, args.logistic, args.head)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_json(args.out, {"schema": "hdrvqa-report", "version": SCHEMA_VERSION,
                          "dataset_id": manifest.dataset_id, "split": args.split, "kind": model.kind,
                          "metrics": report.to_dict()})
    pred_path = args.predictions or os.path.splitext(args.out)[0] + "_predictions.csv"
    export_predictions(pred_path, rows)
    write_record(out_dir, cfg, "eval", model=os.path.abspath(args.model),
                 manifest=os.path.abspath(args.manifest), split=args.split, logistic=args.logistic)
    print(json.dumps(report.to_dict()))


def cmd_gen_synthetic(args):
    cfg = _config_from_args(args)
    manifest = generate_synthetic(args.out, n_refs=args.n_refs, levels=args.levels, seed=cfg.seed,
                                  dataset_id=args.dataset_id, width=args.width, height=args.height,
                                  n_frames=args.frames, fps=args.fps, bit_depth=args.bit_depth)
    write_record(args.out, cfg, "gen-synthetic", dataset_id=args.dataset_id, n_refs=args.n_refs,
                 levels=args.levels, width=args.width, height=args.height, frames=args.frames, fps=args.fps,
                 bit_depth=args.bit_depth)
    print(json.dumps({"manifest": os.path.join(args.out, "manifest.csv"), "videos": len(manifest),
                      "train": len(manifest.split("train")), "val": len(manifest.split("val"))}))


# argument parsing

def _common(p, train=False):
    p.add_argument("--config", help="TOML settings file")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--size", type=int, help="square preprocessing size (default 384)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="parallel workers for scoring (default: available cores)")
    if train:
        p.add_argument("--lr", type=float, help="learning rate (default 1e-4 FR, 1e-5 NR)")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--finetune-epochs", type=int)
        p.add_argument("--out", default=".", help="output directory (default: current)")


def build_parser():
    parser = Parser(prog="vqa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("preprocess", help="decode, sample at 1 fps, convert to RGB and resize")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("extract", help="feature pyramids for preprocessed frames")
    p.add_argument("--frames", required=True, help="directory written by 'vqa preprocess'")
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="take backbone weights from this checkpoint instead of seeded init")
    _common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-fr", help="pretrain then fine-tune a full-reference model")
    p.add_argument("--pretrain", help="manifest of the pretraining dataset (optional)")
    p.add_argument("--finetune", required=True, help="manifest of the target dataset")
    p.add_argument("--pretrain-epochs", type=int)
    _common(p, train=True)
    p.set_defaults(func=cmd_train_fr)

    p = sub.add_parser("train-nr", help="iterative mixed-dataset training of a no-reference model")
    p.add_argument("--datasets", nargs="+", required=True, help="manifests, visited in this order")
    p.add_argument("--target", help="dataset id to fine-tune on (default: last)")
    p.add_argument("--e-min", type=int)
    p.add_argument("--loops", type=int)
    p.add_argument("--freeze-backbone", action="store_const", const=True,
                   help="fine-tune only the target head")
    _common(p, train=True)
    p.set_defaults(func=cmd_train_nr)

    p = sub.add_parser("score", help="score one video")
    p.add_argument("--mode", choices=("fr", "nr"), required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--dist", required=True)
    p.add_argument("--ref")
    p.add_argument("--head", help="regression head (default: the model's default)")
    p.add_argument("--out", help="also write the JSON result here")
    _common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate a model on a manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--out", default="report.json")
    p.add_argument("--predictions", help="CSV path (default: <out stem>_predictions.csv)")
    p.add_argument("--logistic", action="store_true", help="fit a 4-parameter logistic before PLCC/RMSE")
    p.add_argument("--head")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-synthetic", help="write a synthetic blur/noise dataset and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n-refs", type=int, default=5)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--dataset-id", default="synthetic")
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--fps", type=int, default=4)
    p.add_argument("--bit-depth", type=int, choices=(8, 10), default=8)
    p.add_argument("--config", help="TOML settings file")
    p.add_argument("--seed", type=int, help="root seed")
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def dispatch(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (NumericError, FloatingPointError) as exc:
        print(f"vqa: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (VQAError, ValueError, KeyError, OSError) as exc:
        print(f"vqa: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None):
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
