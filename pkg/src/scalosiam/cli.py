"""Command-line entry point: corpus synthesis, TFR caching, training, evaluation, reports.

Every flag overrides a field of a JSON run config (``--config``); the effective
config is echoed into the run directory. Exit codes: 0 success, 2 config
error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import audio
from .autodiff.checkpoint import CheckpointError, atomic_write
from .episodes import TrainConfig, TrainingError, split_classes, train
from .evaluation import ProtocolError, read_csv, report_table, write_csv, plot_baselines
from .imagecache import ImageCache, load_images, populate
from .pipeline import EvalSettings, run_protocol
from .siamese import (
    ConvSiameseConfig,
    ResidualSiameseConfig,
    architecture_table,
    build_model,
    load_model,
    param_count,
    save_model,
)
from .tfr import TfrConfig, TfrError

log = logging.getLogger("scalosiam")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
REPRO_SPLITS = (2, 5, 8, 10, 12)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str = ""
    preset: str = "default"
    clips_per_class: int = 20
    quota: int = 0  # 0: use every clip of the smallest class
    rate: int = audio.DESK_RATE
    cache: str = ""
    kind: str = "scalogram"
    beta: float = 20.0
    gamma: float = 3.0
    voices: int = 10
    window: int = 256
    hop: int = 64
    image_size: int = 64
    arch: str = "conv"
    scale: str = "desk"
    model: dict = field(default_factory=dict)
    lr: float = 6e-4
    epochs: int = 50
    batches_per_epoch: int = 20
    batch_size: int = 16
    dropout_rate: float = None  # None: 0 at desk scale, 0.2 at full scale
    same_fraction: float = 0.5
    n_train: int = 6
    n_way: int = 2
    trials: int = 400
    repetitions: int = 3
    runs_dir: str = "runs"
    name: str = "default"
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        return cls(**d)

    def validate(self, with_model=True):
        if self.arch not in ("conv", "residual"):
            raise ConfigError(f"arch must be conv or residual, got {self.arch!r}")
        if self.scale not in ("desk", "full"):
            raise ConfigError(f"scale must be desk or full, got {self.scale!r}")
        if self.kind not in ("scalogram", "spectrogram"):
            raise ConfigError(f"kind must be scalogram or spectrogram, got {self.kind!r}")
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        try:
            if with_model:
                self.model_config().validate()
            self.train_config()
            self.tfr()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def dropout(self):
        if self.dropout_rate is not None:
            return self.dropout_rate
        return 0.0 if self.scale == "desk" else 0.2

    @property
    def run_dir(self):
        return Path(self.runs_dir) / self.name

    @property
    def cache_dir(self):
        return Path(self.cache) if self.cache else Path(self.data) / ".tfr-cache"

    def tfr(self):
        return TfrConfig(self.kind, self.beta, self.gamma, self.voices, self.window, self.hop, self.image_size)

    def model_config(self):
        cls = ConvSiameseConfig if self.arch == "conv" else ResidualSiameseConfig
        kw = {k: _tupled(v) for k, v in self.model.items()}
        kw.setdefault("input_shape", (self.image_size, self.image_size, 3))
        kw.setdefault("dropout_rate", self.dropout)
        if self.scale == "desk":
            return cls.desk(**kw)
        return cls(**kw)

    def train_config(self):
        return TrainConfig(
            lr=self.lr, epochs=self.epochs, batches_per_epoch=self.batches_per_epoch,
            batch_size=self.batch_size, dropout_rate=self.dropout, seed=self.seed,
            representation=self.kind, same_fraction=self.same_fraction,
        )

    def eval_settings(self):
        return EvalSettings(self.n_way, self.trials, self.repetitions)


def _tupled(v):
    return tuple(_tupled(x) for x in v) if isinstance(v, list) else v


# ------------------------------------------------------------------ helpers

def _manifest(cfg):
    if not cfg.data:
        raise ConfigError("--data is required")
    root = Path(cfg.data)
    if not root.is_dir():
        raise audio.AudioError(f"dataset root {root} does not exist")
    quota = cfg.quota
    if quota <= 0:
        counts = [
            sum(1 for f in d.iterdir() if f.suffix.lower() in audio.AUDIO_EXTENSIONS)
            for d in root.iterdir() if d.is_dir() and not d.name.startswith(".")
        ]
        if not counts:
            raise audio.AudioError(f"dataset root {root} has no class directories")
        quota = min(counts)
    return audio.build_manifest(root, quota)


def _images(cfg, manifest):
    cache = ImageCache(cfg.cache_dir)
    tcfg = cfg.tfr()
    missing = [p for p in manifest.all_paths() if (p, tcfg.digest()) not in cache]
    if missing:
        raise audio.AudioError(f"{len(missing)} clips lack cached {cfg.kind} images; run `tfr` first")
    return load_images(manifest, tcfg, cache)


def _echo_config(cfg, run_dir):
    run_dir.mkdir(parents=True, exist_ok=True)
    atomic_write(run_dir / "config.json", json.dumps(asdict(cfg), indent=2, sort_keys=True), mode="w")


# ----------------------------------------------------------------- commands

def cmd_synth(cfg, args):
    if cfg.preset != "default":
        raise ConfigError(f"unknown preset {cfg.preset!r}; available: default")
    out = Path(args.out or cfg.data)
    if not str(out):
        raise ConfigError("--out is required")
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = audio.synth_corpus(out, cfg.clips_per_class, cfg.seed, rate=cfg.rate)
    except OSError as exc:
        raise audio.AudioError(f"cannot write corpus to {out}: {exc}") from exc
    manifest = audio.build_manifest(out, cfg.clips_per_class)
    print(f"wrote {len(files)} clips in {len(manifest.classes)} classes to {out}")
    for c in manifest.classes:
        print(f"  {c}: {len(manifest.entries[c])}")


def cmd_ingest(cfg, args):
    manifest = _manifest(cfg)
    out = Path(args.out) if args.out else Path(cfg.data) / "manifest.json"
    manifest.save(out)
    print(f"{len(manifest.classes)} classes x {manifest.per_class_quota} clips -> {out}")


def cmd_tfr(cfg, args):
    manifest = _manifest(cfg)
    cache = ImageCache(cfg.cache_dir)
    computed, hits = populate(manifest, cfg.tfr(), cache, rate=cfg.rate)
    print(f"{cfg.kind}: {computed} computed, {hits} cache hits ({cfg.cache_dir})")


def cmd_train(cfg, args):
    manifest = _manifest(cfg)
    images = _images(cfg, manifest)
    split = split_classes(manifest, cfg.n_train, cfg.seed)
    model = build_model(cfg.arch, cfg.model_config(), np.random.default_rng([cfg.seed, 0]))
    _echo_config(cfg, cfg.run_dir)
    result = train(model, manifest, split, images, cfg.train_config(), run_dir=cfg.run_dir)
    print(f"trained on {', '.join(split.train_classes)}; best epoch {result.best_epoch} "
          f"loss {result.best_loss:.4f}; checkpoint {cfg.run_dir / 'ckpt'}")


def cmd_eval(cfg, args):
    manifest = _manifest(cfg)
    images = _images(cfg, manifest)
    _echo_config(cfg, cfg.run_dir)
    rows, record = run_protocol(
        manifest, images, cfg.arch, cfg.model_config(), cfg.train_config(),
        cfg.n_train, cfg.eval_settings(), seed=cfg.seed,
    )
    path = cfg.run_dir / "eval.csv"
    write_csv(path, rows)
    for r in rows:
        print(f"{r.architecture:>16} {r.representation}: max {r.max_accuracy:.4f} mean {r.mean_accuracy:.4f}")
    print(f"wrote {path}")


def cmd_report(cfg, args):
    paths = [Path(p) for p in args.csv] or sorted(Path(cfg.runs_dir).glob("*/eval.csv"))
    if not paths:
        raise audio.AudioError("no eval.csv files to report")
    rows = []
    for p in paths:
        if not p.exists():
            raise audio.AudioError(f"missing eval CSV {p}")
        rows.extend(read_csv(p))
    text = report_table(rows)
    out = Path(args.out) if args.out else cfg.run_dir / "report.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(out, text, mode="w")
    print(text, end="")
    if args.plot:
        plot_baselines(rows, args.plot)
        print(f"plot written to {args.plot}")


def cmd_model_info(cfg, args):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists() or not Path(str(ckpt) + ".json").exists():
        raise audio.AudioError(f"checkpoint {ckpt} or its .json sidecar is missing")
    model = load_model(ckpt)
    print(f"architecture: {model.architecture}")
    print(f"input shape:  {model.input_shape}")
    print(f"embedding:    {model.embedding_dim}")
    for name, shape, count in architecture_table(model):
        print(f"  {name:<24} {str(shape):<22} {count:>12,}")
    print(f"total parameters: {param_count(model):,}")


def cmd_repro(cfg, args):
    """Repeated-run protocol over the standard split sizes for both representations."""
    manifest = _manifest(cfg)
    splits = [n for n in REPRO_SPLITS if n < len(manifest.classes)]
    if not splits:
        raise ConfigError(f"{len(manifest.classes)} classes are too few for the repro splits")
    kinds = [args.kind] if args.kind else ["scalogram", "spectrogram"]
    rows = []
    for kind in kinds:
        kcfg = replace(cfg, kind=kind)
        populate(manifest, kcfg.tfr(), ImageCache(kcfg.cache_dir), rate=cfg.rate)
        images = _images(kcfg, manifest)
        for n_train in splits:
            got, _ = run_protocol(
                manifest, images, cfg.arch, kcfg.model_config(), kcfg.train_config(),
                n_train, kcfg.eval_settings(), seed=cfg.seed,
            )
            rows.extend(got)
    _echo_config(cfg, cfg.run_dir)
    write_csv(cfg.run_dir / "eval.csv", rows)
    text = report_table(rows)
    atomic_write(cfg.run_dir / "report.txt", text, mode="w")
    print(text, end="")


# ------------------------------------------------------------------- parser

def _add_shared(p):
    p.add_argument("--config", help="JSON run config; flags override its fields")
    p.add_argument("--data", help="dataset root (one subdirectory per class)")
    p.add_argument("--seed", type=int)
    p.add_argument("--rate", type=int, help="resample clips to this rate")
    p.add_argument("--quota", type=int, help="clips per class (default: smallest class)")
    p.add_argument("--cache", help="TFR cache directory (default: <data>/.tfr-cache)")
    p.add_argument("--runs-dir", dest="runs_dir")
    p.add_argument("--name", help="run directory name under runs-dir")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_tfr(p):
    p.add_argument("--kind", choices=["scalogram", "spectrogram"])
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--voices", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--hop", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)


def _add_train(p):
    p.add_argument("--arch", choices=["conv", "residual"])
    p.add_argument("--scale", choices=["desk", "full"])
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batches-per-epoch", dest="batches_per_epoch", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--dropout-rate", dest="dropout_rate", type=float)
    p.add_argument("--n-train", dest="n_train", type=int)


def _add_eval(p):
    p.add_argument("--n-way", dest="n_way", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--repetitions", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="scalosiam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic eight-class corpus")
    _add_shared(p)
    p.add_argument("--preset")
    p.add_argument("--out")
    p.add_argument("--clips-per-class", dest="clips_per_class", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="build a balanced manifest from a class-per-directory corpus")
    _add_shared(p)
    p.add_argument("--out", help="manifest JSON path")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("tfr", help="render and cache scalogram or spectrogram images")
    _add_shared(p)
    _add_tfr(p)
    p.set_defaults(func=cmd_tfr)

    p = sub.add_parser("train", help="train one model on a seeded class split")
    _add_shared(p)
    _add_tfr(p)
    _add_train(p)
    p.set_defaults(func=cmd_train, builds_model=True)

    p = sub.add_parser("eval", help="repeated train/evaluate protocol; writes eval.csv")
    _add_shared(p)
    _add_tfr(p)
    _add_train(p)
    _add_eval(p)
    p.set_defaults(func=cmd_eval, builds_model=True)

    p = sub.add_parser("report", help="render eval CSVs as an accuracy table")
    _add_shared(p)
    p.add_argument("csv", nargs="*", help="eval CSV files (default: <runs-dir>/*/eval.csv)")
    p.add_argument("--out", help="report text path")
    p.add_argument("--plot", help="also write a bar chart PNG here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("model", help="model utilities")
    msub = p.add_subparsers(dest="model_command", required=True)
    q = msub.add_parser("info", help="print the parameter table of a checkpoint")
    _add_shared(q)
    q.add_argument("checkpoint")
    q.set_defaults(func=cmd_model_info)

    p = sub.add_parser("repro", help="protocol over the 2/5/8/10/12 splits on a user-supplied corpus")
    _add_shared(p)
    _add_tfr(p)
    _add_train(p)
    _add_eval(p)
    p.set_defaults(func=cmd_repro, repetitions_default=10, builds_model=True)
    return parser


_NOT_CONFIG = {"config", "verbose", "func", "command", "model_command", "out", "csv", "plot",
               "checkpoint", "repetitions_default", "builds_model"}


def resolve_config(args):
    base = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                base = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(base, dict):
            raise ConfigError("config file must hold a JSON object")
    if getattr(args, "repetitions_default", None) and "repetitions" not in base:
        base["repetitions"] = args.repetitions_default
    for k, v in vars(args).items():
        if k not in _NOT_CONFIG and v is not None:
            base[k] = v
    return RunConfig.from_dict(base).validate(with_model=getattr(args, "builds_model", False))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        cfg = resolve_config(args)
        args.func(cfg, args)
    except (ConfigError, TfrError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ProtocolError as exc:
        cause = exc.__cause__
        code = EXIT_NUMERIC if isinstance(cause, (TrainingError, FloatingPointError)) else EXIT_DATA
        print(f"{'numeric failure' if code == EXIT_NUMERIC else 'data error'}: {exc}", file=sys.stderr)
        return code
    except (audio.AudioError, CheckpointError, OSError, KeyError, RuntimeError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
