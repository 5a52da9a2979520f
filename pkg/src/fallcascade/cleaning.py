"""Confident-learning label cleaning.

Out-of-fold class probabilities give per-class confidence thresholds (the mean
self-confidence of each given class).  A sample is flagged when the model's
top class disagrees with its label and clears that class's threshold.
Flagged samples are removed, never relabelled.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import net as nn
from .errors import ConfigurationError, DataError

log = logging.getLogger(__name__)


@dataclass
class NetTrainer:
    """Default fold classifier: a compact three-head network."""

    hidden: tuple = (32, 16)
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64

    def __call__(self, X, y, n_classes, seed):
        rng = np.random.default_rng(seed)
        model = nn.build_network(X.shape[1], n_classes, nn.mini_arch(n_classes, self.hidden), rng=rng)
        nn.fit(model, X, y, "mfec", lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, rng=rng)
        return model.predict_proba


def stratified_folds(labels, folds, seed):
    """Fold index per sample; each class is dealt round-robin after shuffling."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(labels), dtype=int)
    offset = 0
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        assignment[members] = (np.arange(len(members)) + offset) % folds
        offset += len(members)
    return assignment


def crossval_probs(X, labels, n_classes, folds=5, trainer=None, seed=0):
    """Out-of-fold predicted probabilities, shape ``(N, n_classes)``."""
    if folds < 2:
        raise ConfigurationError("cross-validation needs at least 2 folds")
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels, dtype=int)
    trainer = trainer or NetTrainer()
    counts = np.bincount(labels, minlength=n_classes)
    sparse = [c for c in range(n_classes) if counts[c] < 2]
    if sparse:
        raise DataError(f"classes {sparse} have fewer than 2 samples; they would be absent from a training fold")
    assignment = stratified_folds(labels, folds, seed)
    probs = np.zeros((len(labels), n_classes))
    for k in range(folds):
        held = assignment == k
        if not held.any():
            continue
        train_labels = labels[~held]
        absent = np.setdiff1d(np.arange(n_classes), train_labels)
        if absent.size:
            raise DataError(f"classes {absent.tolist()} absent from training fold {k}")
        predict = trainer(X[~held], train_labels, n_classes, seed * 1000 + k)
        probs[held] = predict(X[held])
        log.debug("fold %d/%d done (%d held out)", k + 1, folds, int(held.sum()))
    return probs


def class_thresholds(probs, given):
    probs = np.asarray(probs)
    given = np.asarray(given, dtype=int)
    t = np.zeros(probs.shape[1])
    for j in range(probs.shape[1]):
        members = given == j
        if not members.any():
            raise DataError(f"class {j} has no samples; its threshold is undefined")
        t[j] = probs[members, j].mean()
    return t


@dataclass
class CleaningReport:
    given: np.ndarray
    predicted: np.ndarray
    prob: np.ndarray
    flagged: np.ndarray
    thresholds: np.ndarray
    counts: np.ndarray  # flagged samples per (given, predicted)

    @property
    def n_flagged(self):
        return int(self.flagged.sum())

    @property
    def flagged_indices(self):
        return np.flatnonzero(self.flagged)

    def write_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "given", "predicted", "prob", "flagged"])
            for i in range(len(self.given)):
                w.writerow([i, int(self.given[i]), int(self.predicted[i]), repr(float(self.prob[i])), int(self.flagged[i])])

    def summary(self):
        return {
            "rule": "flag if argmax class != given label and its probability >= that class's mean self-confidence",
            "n_samples": int(len(self.given)),
            "n_flagged": self.n_flagged,
            "class_thresholds": self.thresholds.tolist(),
            "flag_counts": self.counts.tolist(),
        }

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n", encoding="utf-8")


def flag_mislabeled(probs, given, thresholds):
    probs = np.asarray(probs)
    given = np.asarray(given, dtype=int)
    thresholds = np.asarray(thresholds)
    if probs.shape[0] != given.shape[0] or probs.shape[1] != thresholds.shape[0]:
        raise DataError("probability matrix, labels and thresholds disagree in shape")
    predicted = probs.argmax(axis=1)
    top = probs[np.arange(len(given)), predicted]
    flagged = (predicted != given) & (top >= thresholds[predicted])
    C = probs.shape[1]
    counts = np.zeros((C, C), dtype=int)
    np.add.at(counts, (given[flagged], predicted[flagged]), 1)
    return CleaningReport(given, predicted, top, flagged, thresholds, counts)


def clean(dataset, report: CleaningReport):
    """Drop flagged rows from ``dataset`` (anything supporting ``len`` and ``subset``)."""
    if len(report.flagged) != len(dataset):
        raise RuntimeError(f"report covers {len(report.flagged)} samples, dataset has {len(dataset)}")
    keep = np.flatnonzero(~report.flagged)
    if keep.size == 0:
        warnings.warn("label cleaning flagged every sample; dataset is now empty", stacklevel=2)
    return dataset.subset(keep)


def find_label_issues(X, given, n_classes, folds=5, trainer=None, seed=0):
    """Cross-validated probabilities, thresholds and flags in one call."""
    probs = crossval_probs(X, given, n_classes, folds, trainer, seed)
    return flag_mislabeled(probs, given, class_thresholds(probs, given))


def clean_feature_set(data, activity_codes, folds=5, trainer=None, seed=0):
    """Clean a :class:`~fallcascade.data.FeatureSet` on its activity labels."""
    codes = list(activity_codes)
    index = {c: i for i, c in enumerate(codes)}
    given = np.array([index[int(a)] for a in data.activity], dtype=int)
    rep = find_label_issues(data.X, given, len(codes), folds, trainer, seed)
    log.info("label cleaning flagged %d of %d samples", rep.n_flagged, len(given))
    return clean(data, rep), rep
