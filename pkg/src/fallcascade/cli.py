"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cascade as cs
from . import cleaning
from .data import (
    ActivityMap,
    SynthConfig,
    is_processed_csv,
    read_processed_csv,
    synthesize_dataset,
    write_processed_csv,
)
from .errors import ConfigurationError, DataError, FallCascadeError, PipelineError, TrainingError
from .metrics import write_report
from .net import load_model, save_model

log = logging.getLogger("fallcascade")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3

COMMANDS = ("synth", "prep", "clean-labels", "train-bfc", "train-mfec", "pipeline", "eval", "predict")
NEEDS_CONFIG = {"pipeline", "train-bfc", "train-mfec"}
RUN_KEYS = ("inputs", "dataset", "synth", "activity_map")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@dataclass
class RunConfig:
    train: cs.TrainConfig
    synth: SynthConfig
    inputs: list = field(default_factory=list)
    dataset: str | None = None
    activity_map: dict | None = None

    def to_dict(self):
        return {
            **self.train.to_dict(),
            "synth": self.synth.to_dict(),
            "inputs": list(self.inputs),
            "dataset": self.dataset,
            "activity_map": self.activity_map,
        }

    def activities(self):
        return ActivityMap(self.activity_map)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(doc, item):
    if "=" not in item:
        raise ConfigurationError(f"--set expects key=value, got {item!r}")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    target = doc
    for p in parts[:-1]:
        target = target.setdefault(p, {})
        if not isinstance(target, dict):
            raise ConfigurationError(f"--set {key}: {p} is not a section")
    target[parts[-1]] = _parse_value(value)


def resolve_config(path=None, overrides=(), fast=False, seed=None):
    """Built-in defaults, overridden by the JSON file and then by --set items."""
    doc = {}
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError(f"config {path} must hold a JSON object")
    for item in overrides:
        _apply_override(doc, item)
    if seed is not None:
        doc["seed"] = seed
        doc.setdefault("synth", {})["seed"] = seed
    run = {k: doc.pop(k) for k in RUN_KEYS if k in doc}
    if fast:
        doc.setdefault("epochs_bfc", 30)
        doc.setdefault("epochs_mfec", 60)
    try:
        train = cs.TrainConfig.from_dict(doc)
        synth = SynthConfig.from_dict(run.get("synth") or {})
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    inputs = run.get("inputs") or []
    if isinstance(inputs, str):
        inputs = [inputs]
    cfg = RunConfig(train, synth, list(inputs), run.get("dataset"), run.get("activity_map"))
    cfg.activities()
    return cfg


def build_parser():
    parser = _Parser(prog="fallcascade", description="Two-stage skeleton-based fall classification.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    helps = {
        "synth": "write a synthetic labelled feature dataset",
        "prep": "raw keypoint CSV files -> processed feature CSV",
        "clean-labels": "remove likely mislabelled rows from a processed CSV",
        "train-bfc": "train the binary fall / no-fall stage",
        "train-mfec": "train the fall-type stage on rows routed by a binary model",
        "pipeline": "run every stage end to end",
        "eval": "score a trained cascade on a processed CSV",
        "predict": "print one class name per input row",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, required=name in NEEDS_CONFIG)
        p.add_argument("--out", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--fast", action="store_true", help="30/60 epoch profile")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--input", dest="inputs", action="append", default=[], type=Path, metavar="PATH")
        p.add_argument("--model", type=Path)
    return parser


def _require(args, name):
    if getattr(args, name) in (None, []):
        raise UsageError(f"{args.command}: --{name.rstrip('s')} is required")


def _out_dir(args):
    _require(args, "out")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _write_config(cfg, out):
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_dataset(args, cfg):
    """Processed CSV from --input, else config ``dataset`` / ``inputs``, else synthetic."""
    sources = [str(p) for p in args.inputs] or ([cfg.dataset] if cfg.dataset else list(cfg.inputs))
    if not sources:
        return synthesize_dataset(cfg.synth, cfg.activities())
    if len(sources) == 1 and is_processed_csv(sources[0]):
        return read_processed_csv(sources[0])
    return cs.load_keypoint_files(sources, cfg.activities())


def _cmd_synth(args, cfg):
    out = _out_dir(args)
    data = synthesize_dataset(cfg.synth, cfg.activities())
    write_processed_csv(out / "dataset.csv", data)
    print(f"{len(data)} rows ({int(data.binary.sum())} falls) -> {out / 'dataset.csv'}")


def _cmd_prep(args, cfg):
    _require(args, "inputs")
    out = _out_dir(args)
    data = cs.load_keypoint_files(args.inputs, cfg.activities())
    write_processed_csv(out / "dataset.csv", data)
    print(f"{len(data)} rows -> {out / 'dataset.csv'}")


def _cmd_clean(args, cfg):
    out = _out_dir(args)
    data = _load_dataset(args, cfg)
    codes = np.unique(data.activity).tolist()
    cleaned, rep = cleaning.clean_feature_set(data, codes, folds=cfg.train.clean_folds, seed=cfg.train.seed)
    write_processed_csv(out / "dataset.csv", cleaned)
    rep.write_csv(out / "cleaning.csv")
    rep.write_json(out / "cleaning.json")
    print(f"flagged {rep.n_flagged} of {len(data)} rows")


def _cmd_train_bfc(args, cfg):
    out = _out_dir(args)
    data = _load_dataset(args, cfg)
    with cs.stage("train_bfc"):
        bfc, bfc_log = cs.train_bfc(data.X, data.binary, cfg.train)
    save_model(bfc, out / "bfc.json")
    cs.write_log(bfc_log, out / "log_bfc.csv")
    cs.build_binary_map(bfc, data.X, cfg.train.m, cfg.train.n, data.keys()).write_csv(out / "qbin.csv")
    print(f"final loss {bfc_log[-1]['loss']:.6f}")


def _cmd_train_mfec(args, cfg):
    _require(args, "model")
    out = _out_dir(args)
    bfc = load_model(args.model / "bfc.json")
    data = _load_dataset(args, cfg)
    with cs.stage("binary_map"):
        qbin = cs.build_binary_map(bfc, data.X, cfg.train.m, cfg.train.n, data.keys())
    Xm, Lm, _ = cs.derive_multiclass_set(data.X, data.multi, qbin)
    with cs.stage("train_mfec"):
        mfec, mfec_log = cs.train_mfec(Xm, Lm, cfg.train)
    cs.CascadeModel(bfc, mfec, cfg.train).save(out)
    cs.write_log(mfec_log, out / "log_mfec.csv")
    qbin.write_csv(out / "qbin.csv")
    print(f"{len(Lm)} rows routed to stage two, final loss {mfec_log[-1]['loss']:.6f}")


def _cmd_pipeline(args, cfg):
    out = _out_dir(args)
    with cs.stage("load"):
        data = _load_dataset(args, cfg)
    result = cs.run_pipeline(data, cfg.train)
    result.save(out)
    print(result.binary_report.format())
    print(result.fall_report.format())


def _cmd_eval(args, cfg):
    _require(args, "model")
    _require(args, "inputs")
    cascade = cs.CascadeModel.load(args.model)
    data = _load_dataset(args, cfg)
    binary, fall = cs.evaluate(cascade, data)
    if args.out is not None:
        out = _out_dir(args)
        write_report(binary, out / "report_binary.csv", out / "report_binary.json")
        write_report(fall, out / "report_fall.csv", out / "report_fall.json")
    print(binary.format())
    print(fall.format())


def _cmd_predict(args, cfg):
    _require(args, "model")
    _require(args, "inputs")
    cascade = cs.CascadeModel.load(args.model)
    rows = []
    for path in args.inputs:
        if is_processed_csv(path):
            rows.append(read_processed_csv(path).X)
        else:
            # raw keypoints go through the same blank-frame and primary-subject filtering as prep
            rows.append(cs.load_keypoint_files([path], cfg.activities()).X)
    X = np.concatenate(rows) if rows else np.zeros((0, 51))
    if len(X) == 0:
        return
    labels, _ = cascade.predict_batch(X)
    sys.stdout.write("".join(name + "\n" for name in cascade.label_names(labels)))


HANDLERS = {
    "synth": _cmd_synth,
    "prep": _cmd_prep,
    "clean-labels": _cmd_clean,
    "train-bfc": _cmd_train_bfc,
    "train-mfec": _cmd_train_mfec,
    "pipeline": _cmd_pipeline,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
}


def _exit_code(exc):
    if isinstance(exc, PipelineError):
        return _exit_code(exc.cause) if isinstance(exc.cause, Exception) else EXIT_TRAINING
    if isinstance(exc, ConfigurationError):
        return EXIT_USAGE
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    return EXIT_TRAINING


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        cfg = resolve_config(args.config, args.overrides, args.fast, args.seed)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"fallcascade {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    log.info("%s config: %s", args.command, json.dumps(cfg.to_dict(), sort_keys=True))
    try:
        if args.out is not None:
            args.out.mkdir(parents=True, exist_ok=True)
            _write_config(cfg, args.out)
        HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (FallCascadeError, OSError) as exc:
        print(f"fallcascade {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
