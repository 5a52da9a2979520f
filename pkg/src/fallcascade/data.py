"""Skeleton keypoint ingestion, cleaning of detections, normalisation and splits.

Keypoints follow the 17-point COCO order emitted by AlphaPose:
nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles (left first).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, ParseError

N_KEYPOINTS = 17
FEATURE_WIDTH = 3 * N_KEYPOINTS
LEFT_HIP, RIGHT_HIP = 11, 12

META_COLUMNS = ["camera_id", "subject_id", "trial_id", "frame_id", "activity_code"]
KEYPOINT_COLUMNS = [f"{a}{k}" for k in range(1, N_KEYPOINTS + 1) for a in ("x", "y", "c")]
RAW_COLUMNS = META_COLUMNS + KEYPOINT_COLUMNS
PROCESSED_COLUMNS = RAW_COLUMNS + ["binary_label", "multi_label"]

FALL_CLASSES = ("HF", "KF", "BF", "SF", "SDF")

# UP-Fall activity numbering.
DEFAULT_ACTIVITIES = {
    1: "HF",
    2: "KF",
    3: "BF",
    4: "SF",
    5: "SDF",
    6: "walking",
    7: "standing",
    8: "sitting",
    9: "picking_up",
    10: "jumping",
    11: "laying",
}

# Blank-frame rule: a detection needs at least K_MIN keypoints above C_MIN.
K_MIN = 5
C_MIN = 0.1


@dataclass(frozen=True)
class ActivityLabel:
    code: int
    name: str
    fall_class: int | None = None

    @property
    def is_fall(self):
        return self.fall_class is not None

    @property
    def fall_name(self):
        return None if self.fall_class is None else FALL_CLASSES[self.fall_class]


class ActivityMap:
    """Maps integer activity codes to names; fall codes must cover the five fall types."""

    def __init__(self, mapping=None):
        mapping = dict(DEFAULT_ACTIVITIES if mapping is None else mapping)
        self.labels = {}
        seen = set()
        for code, name in mapping.items():
            code = int(code)
            fc = FALL_CLASSES.index(name) if name in FALL_CLASSES else None
            if fc is not None:
                if fc in seen:
                    raise ConfigurationError(f"fall class {name} mapped twice")
                seen.add(fc)
            self.labels[code] = ActivityLabel(code, name, fc)
        if len(seen) != len(FALL_CLASSES):
            missing = [n for i, n in enumerate(FALL_CLASSES) if i not in seen]
            raise ConfigurationError(f"activity map lacks fall classes {missing}")

    def __getitem__(self, code):
        try:
            return self.labels[int(code)]
        except KeyError:
            raise DataError(f"unknown activity code {code}") from None

    def __contains__(self, code):
        return int(code) in self.labels

    @property
    def codes(self):
        return sorted(self.labels)

    def binary(self, codes):
        return np.array([1 if self[c].is_fall else 0 for c in codes], dtype=int)

    def multi(self, codes):
        return np.array([-1 if not self[c].is_fall else self[c].fall_class for c in codes], dtype=int)


@dataclass
class SkeletonFrame:
    camera_id: int
    subject_id: int
    trial_id: int
    frame_id: int
    activity: int
    keypoints: np.ndarray  # (17, 3): x, y, confidence
    row: int = 0

    @property
    def recording(self):
        return (self.subject_id, self.trial_id, self.activity, self.camera_id)

    @property
    def key(self):
        return self.recording + (self.frame_id,)


@dataclass
class FeatureVector:
    values: np.ndarray
    binary_label: int
    multi_label: int | None
    provenance: tuple
    activity: int = 0


@dataclass
class FeatureSet:
    """Column-oriented dataset: one row per retained detection."""

    X: np.ndarray
    activity: np.ndarray
    binary: np.ndarray
    multi: np.ndarray  # -1 for no-fall rows
    provenance: np.ndarray  # (N, 4): camera, subject, trial, frame

    def __len__(self):
        return len(self.X)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return FeatureSet(self.X[idx], self.activity[idx], self.binary[idx], self.multi[idx], self.provenance[idx])

    @classmethod
    def from_vectors(cls, vectors):
        if not vectors:
            return cls(
                np.zeros((0, FEATURE_WIDTH)),
                np.zeros(0, int),
                np.zeros(0, int),
                np.zeros(0, int),
                np.zeros((0, 4), int),
            )
        return cls(
            np.stack([v.values for v in vectors]),
            np.array([v.activity for v in vectors], dtype=int),
            np.array([v.binary_label for v in vectors], dtype=int),
            np.array([-1 if v.multi_label is None else v.multi_label for v in vectors], dtype=int),
            np.array([v.provenance for v in vectors], dtype=int),
        )

    def keys(self):
        return [tuple(int(v) for v in row) for row in self.provenance]


# ---------------------------------------------------------------------------
# keypoint CSV
# ---------------------------------------------------------------------------


def _int_cell(value, name, path, line):
    try:
        f = float(value)
    except ValueError:
        raise ParseError(f"column {name}: non-numeric value {value!r}", path, line) from None
    if not f.is_integer():
        raise ParseError(f"column {name}: expected an integer, got {value!r}", path, line)
    return int(f)


def parse_keypoint_csv(path, start_row=0):
    """One :class:`SkeletonFrame` per detection line of a keypoint CSV."""
    path = Path(path)
    frames = []
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file, header row required", path, 1)
        header = [h.strip() for h in header]
        if header[: len(RAW_COLUMNS)] != RAW_COLUMNS:
            raise ParseError(
                f"header must start with {len(RAW_COLUMNS)} columns camera_id,...,x1,y1,c1,...,c17", path, 1
            )
        ncol = len(header)
        for line, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != ncol:
                raise ParseError(f"expected {ncol} columns, got {len(cells)}", path, line)
            meta = [_int_cell(cells[i], META_COLUMNS[i], path, line) for i in range(len(META_COLUMNS))]
            try:
                kp = np.array([float(c) for c in cells[len(META_COLUMNS) : len(RAW_COLUMNS)]])
            except ValueError:
                raise ParseError("non-numeric keypoint value", path, line) from None
            if not np.all(np.isfinite(kp)):
                raise ParseError("non-finite keypoint value", path, line)
            kp = kp.reshape(N_KEYPOINTS, 3)
            if np.any(kp[:, 2] < 0) or np.any(kp[:, 2] > 1):
                raise ParseError("keypoint confidence outside [0, 1]", path, line)
            camera, subject, trial, frame, activity = meta
            frames.append(SkeletonFrame(camera, subject, trial, frame, activity, kp, start_row + len(frames)))
    return frames


def write_keypoint_csv(path, frames):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RAW_COLUMNS)
        for f in frames:
            w.writerow(
                [f.camera_id, f.subject_id, f.trial_id, f.frame_id, f.activity]
                + [repr(float(v)) for v in f.keypoints.ravel()]
            )


def confident_mask(frame, c_min=C_MIN):
    return frame.keypoints[:, 2] > c_min


def remove_blank_frames(frames, k_min=K_MIN, c_min=C_MIN):
    return [f for f in frames if int(confident_mask(f, c_min).sum()) >= k_min]


def _bbox(frame, c_min):
    mask = confident_mask(frame, c_min)
    if not mask.any():
        raise DataError(f"frame {frame.frame_id}: no confident keypoints")
    pts = frame.keypoints[mask, :2]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return lo, hi, mask


def distance_score(frame, c_min=C_MIN):
    """Apparent skeleton size times mean keypoint confidence.

    Nearby, well-detected people score high; reflections and passers-by in the
    background appear smaller and less certain.
    """
    lo, hi, _ = _bbox(frame, c_min)
    diag = math.hypot(*(hi - lo))
    return diag * float(frame.keypoints[:, 2].mean())


def select_primary_subject(frames, c_min=C_MIN):
    """Keep only the highest-scoring detection of each recorded frame.

    Ties go to the detection that was parsed first.  Output keeps input order.
    """
    best = {}
    for pos, f in enumerate(frames):
        s = distance_score(f, c_min)
        cur = best.get(f.key)
        if cur is None or s > cur[0]:
            best[f.key] = (s, pos)
    keep = sorted(pos for _, pos in best.values())
    return [frames[i] for i in keep]


def normalize(frame, activity_map=None, c_min=C_MIN):
    """Hip-centred, bounding-box-diagonal-scaled 51-value feature vector.

    Keypoints at or below ``c_min`` carry zero coordinates; all confidences
    are passed through unchanged.
    """
    activity_map = activity_map or ActivityMap()
    lo, hi, mask = _bbox(frame, c_min)
    diag = math.hypot(*(hi - lo))
    if diag <= 0:
        raise DataError(f"frame {frame.frame_id}: degenerate skeleton (zero bounding-box diagonal)")
    kp = frame.keypoints
    hips = [k for k in (LEFT_HIP, RIGHT_HIP) if mask[k]]
    if hips:
        origin = kp[hips, :2].mean(axis=0)
    else:
        origin = (lo + hi) / 2
    out = np.zeros((N_KEYPOINTS, 3))
    out[mask, :2] = (kp[mask, :2] - origin) / diag
    out[:, 2] = kp[:, 2]
    label = activity_map[frame.activity]
    return FeatureVector(
        out.ravel(),
        int(label.is_fall),
        label.fall_class,
        (frame.camera_id, frame.subject_id, frame.trial_id, frame.frame_id),
        frame.activity,
    )


def preprocess_frames(frames, activity_map=None, k_min=K_MIN, c_min=C_MIN):
    """Blank removal, primary-subject selection and normalisation in one pass."""
    frames = remove_blank_frames(frames, k_min, c_min)
    frames = select_primary_subject(frames, c_min)
    return FeatureSet.from_vectors([normalize(f, activity_map, c_min) for f in frames])


# ---------------------------------------------------------------------------
# processed dataset files
# ---------------------------------------------------------------------------


def write_processed_csv(path, data: FeatureSet):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROCESSED_COLUMNS)
        for i in range(len(data)):
            cam, subj, trial, frame = (int(v) for v in data.provenance[i])
            multi = "" if data.multi[i] < 0 else int(data.multi[i])
            w.writerow(
                [cam, subj, trial, frame, int(data.activity[i])]
                + [repr(float(v)) for v in data.X[i]]
                + [int(data.binary[i]), multi]
            )


def read_processed_csv(path) -> FeatureSet:
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot open ({exc.strerror})") from exc
    rows = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PROCESSED_COLUMNS:
            raise ParseError("not a processed dataset file (header mismatch)", path, 1)
        for line, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(PROCESSED_COLUMNS):
                raise ParseError(f"expected {len(PROCESSED_COLUMNS)} columns, got {len(cells)}", path, line)
            try:
                meta = [int(c) for c in cells[:5]]
                values = [float(c) for c in cells[5 : 5 + FEATURE_WIDTH]]
                binary = int(cells[-2])
                multi = int(cells[-1]) if cells[-1].strip() else -1
            except ValueError:
                raise ParseError("non-numeric value", path, line) from None
            rows.append((meta, values, binary, multi))
    if not rows:
        return FeatureSet.from_vectors([])
    return FeatureSet(
        np.array([r[1] for r in rows], dtype=float),
        np.array([r[0][4] for r in rows], dtype=int),
        np.array([r[2] for r in rows], dtype=int),
        np.array([r[3] for r in rows], dtype=int),
        np.array([r[0][:4] for r in rows], dtype=int),
    )


def is_processed_csv(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    return [h.strip() for h in header] == PROCESSED_COLUMNS


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    strategy: str = "random_stratified"
    seed: int = 0


def _allocate(counts, frac):
    """Largest-remainder allocation of ``round(frac * total)`` across classes."""
    exact = np.asarray(counts, dtype=float) * frac
    alloc = np.floor(exact).astype(int)
    target = int(round(frac * sum(counts)))
    order = sorted(range(len(counts)), key=lambda k: (-(exact[k] - alloc[k]), k))
    for k in order[: max(0, target - alloc.sum())]:
        alloc[k] += 1
    return alloc


def split(data: FeatureSet, spec: SplitSpec = SplitSpec()):
    """Disjoint, exhaustive train/test index split; returns ``(train_idx, test_idx)``."""
    n = len(data)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    if not 0 < spec.train_fraction < 1:
        raise ConfigurationError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(spec.seed)
    if spec.strategy == "random_stratified":
        classes = np.unique(data.activity)
        members = [np.flatnonzero(data.activity == c) for c in classes]
        alloc = _allocate([len(m) for m in members], spec.train_fraction)
        train = []
        for m, k in zip(members, alloc):
            train.extend(rng.permutation(m)[:k])
        train = np.sort(np.array(train, dtype=int))
    elif spec.strategy == "by_trial":
        groups = {}
        for i, (_, subj, trial, _) in enumerate(data.provenance):
            groups.setdefault((int(subj), int(trial)), []).append(i)
        keys = sorted(groups)
        target = spec.train_fraction * n
        train = []
        for j in rng.permutation(len(keys)):
            if len(train) >= target:
                break
            train.extend(groups[keys[j]])
        train = np.sort(np.array(train, dtype=int))
    else:
        raise ConfigurationError(f"unknown split strategy {spec.strategy!r}")
    mask = np.zeros(n, bool)
    mask[train] = True
    test = np.flatnonzero(~mask)
    if len(train) == 0 or len(test) == 0:
        raise ConfigurationError(
            f"train_fraction {spec.train_fraction} leaves an empty side ({len(train)}/{len(test)})"
        )
    return train, test


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Gaussian class clusters in normalised-skeleton feature space.

    Either give ``per_class_counts`` (11 entries, ordered by activity code) or
    ``n_samples`` plus ``fall_fraction``.  ``boundary_fraction`` of the fall
    rows are pulled towards the nearest no-fall cluster by a factor drawn from
    ``boundary_mix``, which puts them near the fall/no-fall margin.
    """

    seed: int = 0
    per_class_counts: list | None = None
    n_samples: int = 5000
    fall_fraction: float = 0.03
    separation: float = 5.0
    noise_sigma: float = 0.1
    boundary_fraction: float = 0.0
    boundary_mix: tuple = (0.4, 0.5)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown synth config keys: {sorted(unknown)}")
        d = dict(d)
        if "boundary_mix" in d:
            d["boundary_mix"] = tuple(d["boundary_mix"])
        return cls(**d)

    def to_dict(self):
        return {
            "seed": self.seed,
            "per_class_counts": self.per_class_counts,
            "n_samples": self.n_samples,
            "fall_fraction": self.fall_fraction,
            "separation": self.separation,
            "noise_sigma": self.noise_sigma,
            "boundary_fraction": self.boundary_fraction,
            "boundary_mix": list(self.boundary_mix),
        }

    def class_counts(self, activity_map):
        codes = activity_map.codes
        if self.per_class_counts is not None:
            counts = [int(c) for c in self.per_class_counts]
            if len(counts) != len(codes):
                raise ConfigurationError(f"per_class_counts needs {len(codes)} entries")
        else:
            if not 0 < self.fall_fraction < 1:
                raise ConfigurationError("fall_fraction must lie in (0, 1)")
            falls = [c for c in codes if activity_map[c].is_fall]
            normal = [c for c in codes if not activity_map[c].is_fall]
            n_fall = int(round(self.n_samples * self.fall_fraction))
            n_normal = self.n_samples - n_fall
            fall_alloc = _allocate([1] * len(falls), n_fall / len(falls))
            normal_alloc = _allocate([1] * len(normal), n_normal / len(normal))
            per = dict(zip(falls, fall_alloc)) | dict(zip(normal, normal_alloc))
            counts = [int(per[c]) for c in codes]
        if min(counts) < 1:
            raise ConfigurationError("every class needs at least one sample")
        return counts


def synthesize_dataset(config: SynthConfig = SynthConfig(), activity_map=None) -> FeatureSet:
    if config.separation <= 0:
        raise ConfigurationError("separation must be positive")
    if config.noise_sigma <= 0:
        raise ConfigurationError("noise_sigma must be positive")
    return _synthesize(config, activity_map or ActivityMap())


def _synthesize(config, activity_map):
    rng = np.random.default_rng(config.seed)
    codes = activity_map.codes
    counts = config.class_counts(activity_map)
    sigma = config.noise_sigma
    centers = config.separation * sigma * rng.normal(size=(len(codes), FEATURE_WIDTH))
    is_fall = np.array([activity_map[c].is_fall for c in codes])
    normal_idx = np.flatnonzero(~is_fall)

    X, act = [], []
    for k, (code, n) in enumerate(zip(codes, counts)):
        pts = centers[k] + sigma * rng.normal(size=(n, FEATURE_WIDTH))
        if is_fall[k] and config.boundary_fraction > 0:
            nb = int(round(n * config.boundary_fraction))
            d = np.linalg.norm(centers[normal_idx] - centers[k], axis=1)
            target = centers[normal_idx[np.argmin(d)]]
            lo, hi = config.boundary_mix
            mix = rng.uniform(lo, hi, size=(nb, 1))
            pts[:nb] += mix * (target - centers[k])
        X.append(pts)
        act.extend([code] * n)
    X = np.concatenate(X)
    act = np.array(act, dtype=int)
    order = rng.permutation(len(act))
    X, act = X[order], act[order]
    n = len(act)
    prov = np.stack(
        [np.ones(n, int), np.arange(n) % 17 + 1, (np.arange(n) // 17) % 3 + 1, np.arange(n)], axis=1
    )
    return FeatureSet(X, act, activity_map.binary(act), activity_map.multi(act), prov)


# Rough standing pose (pixels, image y grows downwards), COCO keypoint order.
_BASE_POSE = np.array(
    [
        [0, -160], [-8, -168], [8, -168], [-16, -164], [16, -164],
        [-40, -120], [40, -120], [-50, -60], [50, -60], [-55, -5], [55, -5],
        [-22, 0], [22, 0], [-24, 80], [24, 80], [-25, 160], [25, 160],
    ],
    dtype=float,
)


@dataclass
class RawSynthConfig:
    """Generator of raw keypoint detections, including the nuisances the
    preprocessing stage has to remove (blank frames, mirrored reflections)."""

    seed: int = 0
    frames_per_recording: int = 20
    subjects: tuple = (1, 2)
    trials: tuple = (1, 2)
    camera_id: int = 1
    blank_rate: float = 0.1
    reflection_rate: float = 0.3
    jitter: float = 3.0
    activities: tuple = tuple(DEFAULT_ACTIVITIES)


def synthesize_keypoint_frames(config: RawSynthConfig = RawSynthConfig()):
    """Detections as a pose estimator would emit them, with known primary subjects.

    Each activity gets its own deformation of a base pose.  Returns
    ``(frames, primary_rows)`` where ``primary_rows`` are the row numbers of
    the true subject detections.
    """
    rng = np.random.default_rng(config.seed)
    deform = {a: rng.normal(scale=25.0, size=_BASE_POSE.shape) for a in config.activities}
    frames, primary = [], []
    for subj in config.subjects:
        for trial in config.trials:
            for act in config.activities:
                for fid in range(config.frames_per_recording):
                    meta = (config.camera_id, subj, trial, fid, act)
                    if rng.random() < config.blank_rate:
                        kp = np.zeros((N_KEYPOINTS, 3))
                        kp[:, 2] = rng.uniform(0, 0.05, N_KEYPOINTS)
                        frames.append(SkeletonFrame(*meta, kp, len(frames)))
                        continue
                    scale = rng.uniform(0.9, 1.1)
                    centre = rng.uniform([250, 200], [390, 280])
                    xy = centre + scale * (_BASE_POSE + deform[act]) + rng.normal(scale=config.jitter, size=(17, 2))
                    conf = rng.uniform(0.6, 0.95, N_KEYPOINTS)
                    subject_kp = np.column_stack([xy, conf])
                    detections = [subject_kp]
                    if rng.random() < config.reflection_rate:
                        refl = subject_kp.copy()
                        refl[:, 0] = 620 - 0.4 * (refl[:, 0] - 200)
                        refl[:, 1] = 150 + 0.4 * (refl[:, 1] - 150)
                        refl[:, 2] *= 0.7
                        detections.append(refl)
                        rng.shuffle(detections)
                    for kp in detections:
                        if kp is subject_kp:
                            primary.append(len(frames))
                        frames.append(SkeletonFrame(*meta, kp, len(frames)))
    return frames, primary
