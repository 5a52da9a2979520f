"""Confusion matrices and per-class precision / recall / F1."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError


def confusion(truth, pred, n_classes):
    """``matrix[t, p]`` counts samples of true class ``t`` predicted as ``p``."""
    truth = np.asarray(truth, dtype=int).ravel()
    pred = np.asarray(pred, dtype=int).ravel()
    if truth.shape != pred.shape:
        raise DataError(f"{truth.size} truth labels vs {pred.size} predictions")
    for name, arr in (("truth", truth), ("prediction", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise DataError(f"{name} label outside 0..{n_classes - 1}")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (truth, pred), 1)
    return m


@dataclass
class ClassificationReport:
    labels: list
    matrix: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    unassigned: np.ndarray
    undefined: list  # classes whose precision or recall had an empty denominator

    @property
    def macro_f1(self):
        return float(self.f1.mean())

    @property
    def worst_f1(self):
        return float(self.f1.min())

    def rows(self):
        for i, name in enumerate(self.labels):
            yield name, int(self.support[i]), float(self.precision[i]), float(self.recall[i]), float(self.f1[i])

    def summary(self):
        return {
            "labels": list(self.labels),
            "macro_f1": self.macro_f1,
            "matrix": self.matrix.tolist(),
            "unassigned": self.unassigned.tolist(),
            "undefined": list(self.undefined),
            "per_class": {
                name: {"support": s, "precision": p, "recall": r, "f1": f} for name, s, p, r, f in self.rows()
            },
        }

    def format(self, digits=2):
        lines = [f"{'class':>10} {'support':>8} {'precision':>9} {'recall':>7} {'f1':>6}"]
        for name, s, p, r, f in self.rows():
            lines.append(f"{name:>10} {s:>8d} {p:>9.{digits}f} {r:>7.{digits}f} {f:>6.{digits}f}")
        lines.append(f"{'macro F1':>10} {'':>8} {'':>9} {'':>7} {self.macro_f1:>6.{digits}f}")
        return "\n".join(lines)


def report(matrix, labels, unassigned=None):
    """Per-class metrics from a square confusion matrix.

    ``unassigned[c]`` counts samples of true class ``c`` that received no class
    at all (e.g. rejected upstream).  They add to the support and lower the
    recall of ``c`` but never touch any column.  Empty denominators give 0 and
    the class is listed in ``undefined``.
    """
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DataError(f"confusion matrix must be square, got shape {m.shape}")
    if len(labels) != m.shape[0]:
        raise DataError(f"{len(labels)} labels for a {m.shape[0]}-class matrix")
    if np.any(m < 0):
        raise DataError("confusion matrix has negative counts")
    C = m.shape[0]
    unassigned = np.zeros(C, dtype=np.int64) if unassigned is None else np.asarray(unassigned, dtype=np.int64)
    tp = np.diag(m).astype(float)
    col = m.sum(axis=0).astype(float)
    support = m.sum(axis=1) + unassigned
    precision = np.zeros(C)
    recall = np.zeros(C)
    f1 = np.zeros(C)
    undefined = []
    for c in range(C):
        bad = False
        if col[c] > 0:
            precision[c] = tp[c] / col[c]
        else:
            bad = True
        if support[c] > 0:
            recall[c] = tp[c] / support[c]
        else:
            bad = True
        if precision[c] + recall[c] > 0:
            f1[c] = 2 * precision[c] * recall[c] / (precision[c] + recall[c])
        if bad:
            undefined.append(labels[c])
    return ClassificationReport(list(labels), m.copy(), precision, recall, f1, support, unassigned, undefined)


def write_report(rep: ClassificationReport, csv_path, json_path=None):
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "support", "precision", "recall", "f1"])
        for name, s, p, r, f in rep.rows():
            w.writerow([name, s, repr(p), repr(r), repr(f)])
    if json_path is not None:
        Path(json_path).write_text(json.dumps(rep.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
