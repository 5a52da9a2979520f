"""Two-stage fall classification.

Stage one (binary) separates falls from everyday activity on all data; its
decisions select the samples used to train and query stage two, which names
the fall type.  Two margins around 0.5 define an uncertainty band: samples in
``[0.5 - m, 0.5 + n)`` are marked uncertain and still passed on to stage two,
so near-miss falls are not silently dropped.
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import cleaning
from . import net as nn
from .data import FALL_CLASSES, FEATURE_WIDTH, FeatureSet, SplitSpec, parse_keypoint_csv, preprocess_frames, split
from .errors import ConfigurationError, FallCascadeError, PipelineError, TrainingError
from .metrics import ClassificationReport, confusion, report, write_report

log = logging.getLogger(__name__)

NO_FALL, FALL, UNCERTAIN = 0, 1, 2
DECISION_NAMES = {NO_FALL: "no_fall", FALL: "fall", UNCERTAIN: "uncertain"}


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_bfc: int = 1024
    batch_mfec: int = 32
    epochs_bfc: int = 300
    epochs_mfec: int = 600
    head_weights: tuple = nn.DEFAULT_HEAD_WEIGHTS
    m: float = 0.03
    n: float = 0.02
    seed: int = 0
    val_fraction: float = 0.1
    train_fraction: float = 0.7
    split_strategy: str = "random_stratified"
    clean_labels: bool = True
    clean_folds: int = 5

    def validate(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch_bfc < 2 or self.batch_mfec < 2:
            raise ConfigurationError("batch sizes must be >= 2")
        if self.epochs_bfc < 1 or self.epochs_mfec < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.m < 0 or self.n < 0 or self.m + self.n >= 0.5:
            raise ConfigurationError(f"thresholds need m, n >= 0 and m + n < 0.5 (got m={self.m}, n={self.n})")
        hw = np.asarray(self.head_weights, dtype=float)
        if hw.shape != (3,) or np.any(hw <= 0):
            raise ConfigurationError("head_weights must be 3 positive reals")
        if not 0 <= self.val_fraction < 1:
            raise ConfigurationError("val_fraction must lie in [0, 1)")
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError("train_fraction must lie in (0, 1)")
        if self.clean_folds < 2:
            raise ConfigurationError("clean_folds must be >= 2")
        return self

    @property
    def normalized_head_weights(self):
        hw = np.asarray(self.head_weights, dtype=float)
        return hw / hw.sum()

    def to_dict(self):
        d = asdict(self)
        d["head_weights"] = list(self.head_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        if "head_weights" in d:
            d["head_weights"] = tuple(float(w) for w in d["head_weights"])
        return cls(**d).validate()

    def fast(self):
        """CI-sized profile: epochs cut to 30 / 60."""
        return TrainConfig(**{**self.to_dict(), "epochs_bfc": 30, "epochs_mfec": 60, "head_weights": self.head_weights})


def _rng(cfg, stage):
    return np.random.default_rng([cfg.seed, stage])


# stream ids for _rng
_SPLIT, _BFC, _MFEC, _CLEAN, _VAL = 1, 2, 3, 4, 5


# ---------------------------------------------------------------------------
# stage one
# ---------------------------------------------------------------------------


def _holdout(y, fraction, rng):
    """Stratified held-out slice used only for logging."""
    val = []
    for c in np.unique(y):
        members = rng.permutation(np.flatnonzero(y == c))
        k = int(round(fraction * len(members)))
        val.extend(members[: min(k, len(members) - 1)])
    mask = np.zeros(len(y), bool)
    mask[np.array(val, dtype=int)] = True
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def train_bfc(X, y_bin, cfg: TrainConfig, arch=None):
    """Train the binary fall / no-fall network.

    Returns ``(network, log)``; ``log`` holds one dict per epoch with the
    training loss and accuracy / fall recall on a held-out slice.
    """
    cfg.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y_bin, dtype=int)
    if len(np.unique(y)) < 2:
        raise TrainingError("binary training data must contain both falls and no-falls")
    tr, va = _holdout(y, cfg.val_fraction, _rng(cfg, _VAL)) if cfg.val_fraction > 0 else (np.arange(len(y)), [])
    rng = _rng(cfg, _BFC)
    model = nn.build_network(X.shape[1], 1, arch, rng=rng, head_weights=cfg.normalized_head_weights)

    def on_epoch(epoch, net):
        if len(va) == 0:
            return {}
        pred = (net.predict_proba(X[va]).ravel() >= 0.5).astype(int)
        truth = y[va]
        falls = truth == 1
        return {
            "val_accuracy": float((pred == truth).mean()),
            "val_fall_recall": float(pred[falls].mean()) if falls.any() else 0.0,
        }

    records = nn.fit(
        model, X[tr], y[tr], "bfc", lr=cfg.lr, batch_size=cfg.batch_bfc, epochs=cfg.epochs_bfc, rng=rng, on_epoch=on_epoch
    )
    return model, [{"epoch": r.epoch, "loss": r.loss, **r.extras} for r in records]


def route(p, m, n):
    """Decision codes for fall probabilities ``p`` under margins ``m``, ``n``."""
    p = np.asarray(p, dtype=float)
    out = np.full(p.shape, UNCERTAIN, dtype=int)
    out[p >= 0.5 + n] = FALL
    # keep the m = 0 band empty: p < 0.5 is a plain no-fall
    out[(p <= 0.5 - m) if m > 0 else (p < 0.5)] = NO_FALL
    return out


@dataclass
class BinaryMap:
    p: np.ndarray
    decision: np.ndarray
    keys: list = field(default_factory=list)

    def __len__(self):
        return len(self.p)

    @property
    def routed(self):
        """Mask of samples passed to stage two (fall or uncertain)."""
        return self.decision != NO_FALL

    def write_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["key", "p", "decision"])
            for i in range(len(self.p)):
                key = ":".join(str(k) for k in self.keys[i]) if self.keys else str(i)
                w.writerow([key, repr(float(self.p[i])), DECISION_NAMES[int(self.decision[i])]])


def build_binary_map(bfc, X, m, n, keys=None):
    p = bfc.predict_proba(np.asarray(X, dtype=float)).ravel()
    return BinaryMap(p, route(p, m, n), list(keys) if keys is not None else [])


def derive_multiclass_set(X, multi_labels, qbin: BinaryMap):
    """Rows routed to stage two that carry a fall-type label.

    Returns ``(X_multi, L_multi, indices)``; routed rows without a fall label
    are left out because stage two has no class for them.
    """
    multi_labels = np.asarray(multi_labels, dtype=int)
    if len(qbin) != len(multi_labels):
        raise RuntimeError("binary map is not aligned with the data")
    idx = np.flatnonzero(qbin.routed & (multi_labels >= 0))
    if idx.size == 0:
        raise PipelineError(
            "derive_multiclass_set",
            "no labelled fall reached stage two; check the data has falls or widen the threshold band (m)",
        )
    return np.asarray(X)[idx], multi_labels[idx], idx


# ---------------------------------------------------------------------------
# stage two
# ---------------------------------------------------------------------------


def train_mfec(X, y_multi, cfg: TrainConfig, n_classes=len(FALL_CLASSES), arch=None):
    cfg.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y_multi, dtype=int)
    present = np.unique(y)
    if len(present) < 2:
        raise TrainingError("fall-type training data must contain at least 2 classes")
    absent = sorted(set(range(n_classes)) - set(present.tolist()))
    if absent:
        raise TrainingError(f"fall classes {[FALL_CLASSES[a] for a in absent]} absent from stage-two training data")
    rng = _rng(cfg, _MFEC)
    model = nn.build_network(X.shape[1], n_classes, arch, rng=rng, head_weights=cfg.normalized_head_weights)

    def on_epoch(epoch, net):
        return {"train_accuracy": float((net.predict_proba(X).argmax(axis=1) == y).mean())}

    records = nn.fit(
        model, X, y, "mfec", lr=cfg.lr, batch_size=cfg.batch_mfec, epochs=cfg.epochs_mfec, rng=rng, on_epoch=on_epoch
    )
    return model, [{"epoch": r.epoch, "loss": r.loss, **r.extras} for r in records]


# ---------------------------------------------------------------------------
# cascade
# ---------------------------------------------------------------------------


@dataclass
class CascadeModel:
    bfc: nn.Network
    mfec: nn.Network
    config: TrainConfig
    class_names: tuple = FALL_CLASSES
    mfec_calls: int = 0  # rows evaluated by stage two so far

    def __post_init__(self):
        if self.bfc.input_width != FEATURE_WIDTH or self.mfec.input_width != FEATURE_WIDTH:
            raise ConfigurationError(f"both stages must take {FEATURE_WIDTH} inputs")
        if tuple(self.class_names) != FALL_CLASSES:
            raise ConfigurationError(f"class names must be {FALL_CLASSES}")

    def _classify_falls(self, X):
        self.mfec_calls += len(X)
        return self.mfec.predict_proba(X).argmax(axis=1)  # argmax ties -> lowest index

    def predict_batch(self, X):
        """Fall-class index per row, or -1 for no-fall; also returns fall probabilities."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        qbin = build_binary_map(self.bfc, X, self.config.m, self.config.n)
        out = np.full(len(X), -1, dtype=int)
        routed = np.flatnonzero(qbin.routed)
        if routed.size:
            out[routed] = self._classify_falls(X[routed])
        return out, qbin

    def predict(self, sample):
        """``"no_fall"`` or one of the fall-class names for a single sample."""
        values = getattr(sample, "values", sample)
        label = self.predict_batch(np.asarray(values, dtype=float).reshape(1, -1))[0][0]
        return "no_fall" if label < 0 else self.class_names[label]

    def label_names(self, labels):
        return ["no_fall" if k < 0 else self.class_names[k] for k in labels]

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        nn.save_model(self.bfc, out / "bfc.json")
        nn.save_model(self.mfec, out / "mfec.json")
        meta = {"class_names": list(self.class_names), "config": self.config.to_dict()}
        (out / "cascade.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, model_dir):
        d = Path(model_dir)
        meta_path = d / "cascade.json"
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise nn.ModelLoadError(f"{meta_path}: {exc}") from exc
        cfg = TrainConfig.from_dict(meta.get("config", {}))
        return cls(nn.load_model(d / "bfc.json"), nn.load_model(d / "mfec.json"), cfg, tuple(meta["class_names"]))


def evaluate(cascade: CascadeModel, data: FeatureSet):
    """Binary report over all rows and fall-type report over true falls.

    In the fall-type report a fall that stage one rejected counts against its
    true class (it lowers recall but no column receives it).
    """
    pred, qbin = cascade.predict_batch(data.X)
    binary_pred = (pred >= 0).astype(int)
    binary = report(confusion(data.binary, binary_pred, 2), ["no_fall", "fall"])
    falls = np.flatnonzero(data.multi >= 0)
    truth = data.multi[falls]
    fp = pred[falls]
    assigned = fp >= 0
    C = len(FALL_CLASSES)
    unassigned = np.bincount(truth[~assigned], minlength=C)
    fall_rep = report(confusion(truth[assigned], fp[assigned], C), list(FALL_CLASSES), unassigned)
    return binary, fall_rep


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except PipelineError:
        raise
    except FallCascadeError as exc:
        raise PipelineError(name, exc) from exc
    except OSError as exc:
        raise PipelineError(name, exc) from exc


@dataclass
class PipelineResult:
    cascade: CascadeModel
    binary_report: ClassificationReport
    fall_report: ClassificationReport
    qbin: BinaryMap
    bfc_log: list
    mfec_log: list
    train_idx: np.ndarray
    test_idx: np.ndarray
    clean_report: cleaning.CleaningReport | None = None
    data: FeatureSet | None = None

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.cascade.save(out)
        self.qbin.write_csv(out / "qbin.csv")
        write_report(self.binary_report, out / "report_binary.csv", out / "report_binary.json")
        write_report(self.fall_report, out / "report_fall.csv", out / "report_fall.json")
        write_log(self.bfc_log, out / "log_bfc.csv")
        write_log(self.mfec_log, out / "log_mfec.csv")
        if self.clean_report is not None:
            self.clean_report.write_csv(out / "cleaning.csv")
            self.clean_report.write_json(out / "cleaning.json")


def write_log(records, path):
    if not records:
        return
    cols = list(records[0])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def run_pipeline(
    data: FeatureSet, cfg: TrainConfig, arch_bfc=None, arch_mfec=None, cleaner=None, bfc=None
):
    """Label cleaning, split, both training stages and evaluation on a feature set.

    Passing a trained ``bfc`` skips stage-one training (it does not depend on
    the thresholds, so paired threshold runs can share it).
    """
    cfg.validate()
    clean_rep = None
    if cfg.clean_labels:
        with stage("clean_labels"):
            codes = np.unique(data.activity).tolist()
            data, clean_rep = cleaning.clean_feature_set(
                data, codes, folds=cfg.clean_folds, trainer=cleaner, seed=int(_rng(cfg, _CLEAN).integers(2**31))
            )
    with stage("split"):
        seed = int(_rng(cfg, _SPLIT).integers(2**31))
        train_idx, test_idx = split(data, SplitSpec(cfg.train_fraction, cfg.split_strategy, seed))
        train, test = data.subset(train_idx), data.subset(test_idx)
    bfc_log = []
    if bfc is None:
        with stage("train_bfc"):
            bfc, bfc_log = train_bfc(train.X, train.binary, cfg, arch_bfc)
    with stage("binary_map"):
        qbin = build_binary_map(bfc, train.X, cfg.m, cfg.n, train.keys())
    with stage("derive_multiclass_set"):
        Xm, Lm, _ = derive_multiclass_set(train.X, train.multi, qbin)
    with stage("train_mfec"):
        mfec, mfec_log = train_mfec(Xm, Lm, cfg, arch=arch_mfec)
    with stage("evaluate"):
        cascade = CascadeModel(bfc, mfec, cfg)
        binary_rep, fall_rep = evaluate(cascade, test)
    log.info("binary fall recall %.4f, fall-type macro F1 %.4f", binary_rep.recall[1], fall_rep.macro_f1)
    return PipelineResult(cascade, binary_rep, fall_rep, qbin, bfc_log, mfec_log, train_idx, test_idx, clean_rep, data)


def load_keypoint_files(paths, activity_map=None):
    frames = []
    for p in paths:
        frames.extend(parse_keypoint_csv(p, start_row=len(frames)))
    return preprocess_frames(frames, activity_map)


def run_full_pipeline(csv_paths, cfg: TrainConfig, activity_map=None, **kwargs):
    """Raw keypoint CSV files to trained cascade and reports."""
    with stage("prep"):
        if not csv_paths:
            raise ConfigurationError("no input files given")
        data = load_keypoint_files(csv_paths, activity_map)
        if len(data) == 0:
            raise ConfigurationError("no usable skeleton frames after preprocessing")
    return run_pipeline(data, cfg, **kwargs)
