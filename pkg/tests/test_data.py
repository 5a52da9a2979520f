import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fallcascade import data as fd
from fallcascade.errors import ConfigurationError, DataError, ParseError


def frame(kp, frame_id=0, activity=6, camera=1, row=0):
    return fd.SkeletonFrame(camera, 1, 1, frame_id, activity, np.asarray(kp, dtype=float), row)


def pose(scale=1.0, offset=(300.0, 200.0), conf=0.9):
    kp = np.zeros((17, 3))
    kp[:, :2] = np.asarray(offset) + scale * fd._BASE_POSE
    kp[:, 2] = conf
    return kp


def write_rows(path, rows, header=fd.RAW_COLUMNS):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def raw_row(kp, frame_id=0, activity=1, camera=1):
    return [camera, 1, 1, frame_id, activity] + [repr(float(v)) for v in np.asarray(kp).ravel()]


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def test_parse_single_row(tmp_path):
    kp = pose()
    frames = fd.parse_keypoint_csv(write_rows(tmp_path / "a.csv", [raw_row(kp, 5, 3)]))
    assert len(frames) == 1
    f = frames[0]
    assert (f.camera_id, f.subject_id, f.trial_id, f.frame_id, f.activity) == (1, 1, 1, 5, 3)
    np.testing.assert_array_equal(f.keypoints, kp)


def test_parse_short_row_reports_line(tmp_path):
    good = raw_row(pose())
    bad = raw_row(pose())[:-3]  # 16 keypoints
    with pytest.raises(ParseError) as err:
        fd.parse_keypoint_csv(write_rows(tmp_path / "a.csv", [good, bad]))
    assert err.value.line == 3


def test_parse_non_numeric_cell(tmp_path):
    row = raw_row(pose())
    row[9] = "abc"
    with pytest.raises(ParseError, match=":2:"):
        fd.parse_keypoint_csv(write_rows(tmp_path / "a.csv", [row]))


def test_parse_two_detections_same_frame(tmp_path):
    rows = [raw_row(pose(), 4), raw_row(pose(0.4, (600, 150), 0.6), 4)]
    frames = fd.parse_keypoint_csv(write_rows(tmp_path / "a.csv", rows))
    assert [f.frame_id for f in frames] == [4, 4]


def test_parse_requires_header(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text(",".join(str(v) for v in raw_row(pose())) + "\n")
    with pytest.raises(ParseError):
        fd.parse_keypoint_csv(path)


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        fd.parse_keypoint_csv(tmp_path / "nope.csv")


def test_keypoint_csv_round_trip(tmp_path):
    frames, _ = fd.synthesize_keypoint_frames(fd.RawSynthConfig(frames_per_recording=2, subjects=(1,), trials=(1,)))
    fd.write_keypoint_csv(tmp_path / "k.csv", frames)
    back = fd.parse_keypoint_csv(tmp_path / "k.csv")
    assert len(back) == len(frames)
    for a, b in zip(frames, back):
        assert a.key == b.key
        np.testing.assert_array_equal(a.keypoints, b.keypoints)


# ---------------------------------------------------------------------------
# blank frames, distance score, primary subject
# ---------------------------------------------------------------------------


def test_zero_confidence_frame_dropped():
    kp = pose(conf=0.0)
    assert fd.remove_blank_frames([frame(kp)]) == []


def test_confident_frame_kept():
    f = frame(pose())
    assert fd.remove_blank_frames([f]) == [f]


def test_exactly_k_min_confident_keypoints_kept():
    kp = pose(conf=0.0)
    kp[: fd.K_MIN, 2] = 0.5
    one_less = kp.copy()
    one_less[fd.K_MIN - 1, 2] = fd.C_MIN  # not strictly above c_min
    kept = fd.remove_blank_frames([frame(kp, 0), frame(one_less, 1)])
    assert [f.frame_id for f in kept] == [0]


def test_blank_removal_preserves_order():
    frames = [frame(pose(), i) for i in range(5)]
    frames[2] = frame(pose(conf=0.0), 2)
    assert [f.frame_id for f in fd.remove_blank_frames(frames)] == [0, 1, 3, 4]


def box_frame(w, h, conf):
    kp = np.zeros((17, 3))
    kp[:, 2] = conf
    kp[0, :2] = (100, 100)
    kp[1, :2] = (100 + w, 100 + h)
    kp[2:, :2] = (100 + w / 2, 100 + h / 2)
    return frame(kp)


def test_distance_score_value():
    a = box_frame(120, 160, 0.9)  # diagonal 200
    assert fd.distance_score(a) == pytest.approx(180.0, abs=1e-12)


def test_distance_score_monotone_in_size_and_confidence():
    assert fd.distance_score(box_frame(120, 160, 0.9)) > fd.distance_score(box_frame(30, 40, 0.9))
    assert fd.distance_score(box_frame(120, 160, 0.9)) > fd.distance_score(box_frame(120, 160, 0.3))


def test_distance_score_undefined_without_confident_points():
    with pytest.raises(DataError):
        fd.distance_score(frame(pose(conf=0.0)))


def test_reflection_removed():
    subject = frame(pose(1.0, (300, 220), 0.9), 7, row=0)
    reflection = frame(pose(0.4, (600, 150), 0.6), 7, row=1)
    kept = fd.select_primary_subject([reflection, subject])
    assert kept == [subject]


def test_single_detection_unchanged():
    frames = [frame(pose(), i) for i in range(3)]
    assert fd.select_primary_subject(frames) == frames


def test_equal_scores_keep_first_parsed():
    a = frame(pose(), 3, row=0)
    b = frame(pose(offset=(100, 100)), 3, row=1)
    assert fd.distance_score(a) == fd.distance_score(b)
    assert fd.select_primary_subject([a, b]) == [a]


def test_primary_subject_on_synthetic_recordings():
    frames, primary = fd.synthesize_keypoint_frames(fd.RawSynthConfig(seed=3))
    kept = fd.select_primary_subject(fd.remove_blank_frames(frames))
    keys = [f.key for f in kept]
    assert len(keys) == len(set(keys))
    assert [f.row for f in kept] == primary


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def test_normalize_hand_computed_toy():
    kp = np.zeros((17, 3))
    kp[0] = (20, -20, 0.5)  # nose
    kp[11] = (10, 20, 0.9)  # left hip
    kp[12] = (30, 20, 0.8)  # right hip
    kp[5] = (999, 999, 0.05)  # below c_min: coordinates dropped
    fv = fd.normalize(frame(kp, activity=2))
    diag = math.sqrt(20**2 + 40**2)
    expected = np.zeros(51)
    expected[0:3] = (0.0, -40 / diag, 0.5)
    expected[5 * 3 + 2] = 0.05
    expected[11 * 3 : 11 * 3 + 3] = (-10 / diag, 0.0, 0.9)
    expected[12 * 3 : 12 * 3 + 3] = (10 / diag, 0.0, 0.8)
    np.testing.assert_allclose(fv.values, expected, rtol=0, atol=1e-15)
    assert fv.binary_label == 1 and fv.multi_label == 1  # activity 2 = KF


def test_normalize_hip_midpoint_is_origin():
    fv = fd.normalize(frame(pose(offset=(1234.5, -77.0))))
    v = fv.values.reshape(17, 3)
    np.testing.assert_allclose((v[11, :2] + v[12, :2]) / 2, 0.0, atol=1e-15)


@given(
    st.floats(-5000, 5000),
    st.floats(-5000, 5000),
    st.floats(0.05, 20.0),
    st.integers(0, 2**31 - 1),
)
@settings(max_examples=60, deadline=None)
def test_normalize_translation_and_scale_invariant(tx, ty, s, seed):
    rng = np.random.default_rng(seed)
    kp = pose()
    kp[:, :2] += rng.normal(scale=30, size=(17, 2))
    kp[:, 2] = rng.uniform(0, 1, 17)
    kp[11, 2] = kp[12, 2] = 0.8
    moved = kp.copy()
    moved[:, :2] = s * kp[:, :2] + (tx, ty)
    np.testing.assert_allclose(fd.normalize(frame(kp)).values, fd.normalize(frame(moved)).values, rtol=0, atol=1e-12)


def test_normalize_degenerate_skeleton():
    kp = np.zeros((17, 3))
    kp[:, :2] = (50, 50)
    kp[:, 2] = 0.9
    with pytest.raises(DataError):
        fd.normalize(frame(kp))


def test_binary_label_iff_fall_code():
    amap = fd.ActivityMap()
    for code in amap.codes:
        fv = fd.normalize(frame(pose(), activity=code))
        assert fv.binary_label == (1 if amap[code].name in fd.FALL_CLASSES else 0)
        assert (fv.multi_label is not None) == bool(fv.binary_label)


def test_activity_map_must_cover_fall_classes():
    with pytest.raises(ConfigurationError):
        fd.ActivityMap({1: "HF", 2: "KF", 3: "walking"})


def test_preprocess_is_deterministic(tmp_path):
    frames, _ = fd.synthesize_keypoint_frames(fd.RawSynthConfig(seed=1, frames_per_recording=5))
    fd.write_keypoint_csv(tmp_path / "raw.csv", frames)
    outs = []
    for i in range(2):
        data = fd.preprocess_frames(fd.parse_keypoint_csv(tmp_path / "raw.csv"))
        fd.write_processed_csv(tmp_path / f"p{i}.csv", data)
        outs.append((tmp_path / f"p{i}.csv").read_bytes())
    assert outs[0] == outs[1]


def test_processed_csv_round_trip(tmp_path):
    data = fd.synthesize_dataset(fd.SynthConfig(n_samples=300, fall_fraction=0.1, seed=2))
    fd.write_processed_csv(tmp_path / "d.csv", data)
    back = fd.read_processed_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.X, data.X)
    np.testing.assert_array_equal(back.multi, data.multi)
    np.testing.assert_array_equal(back.binary, data.binary)
    np.testing.assert_array_equal(back.provenance, data.provenance)
    assert fd.is_processed_csv(tmp_path / "d.csv")


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------


def tiny_set(codes):
    n = len(codes)
    codes = np.asarray(codes)
    amap = fd.ActivityMap()
    prov = np.stack([np.ones(n, int), np.arange(n) % 4 + 1, np.arange(n) % 3 + 1, np.arange(n)], axis=1)
    return fd.FeatureSet(np.zeros((n, 51)), codes, amap.binary(codes), amap.multi(codes), prov)


def test_split_counts():
    train, test = fd.split(tiny_set([6] * 100), fd.SplitSpec(0.7))
    assert (len(train), len(test)) == (70, 30)
    assert len(np.intersect1d(train, test)) == 0
    assert sorted(np.concatenate([train, test]).tolist()) == list(range(100))


def test_stratified_split_keeps_fall_rate():
    codes = [6] * 90 + [1] * 10
    data = tiny_set(codes)
    train, _ = fd.split(data, fd.SplitSpec(0.7, seed=5))
    falls = int(data.binary[train].sum())
    assert abs(falls - 0.1 * len(train)) <= 1


@given(st.lists(st.integers(1, 11), min_size=5, max_size=200), st.floats(0.1, 0.9), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_stratified_split_per_class_within_one(codes, frac, seed):
    data = tiny_set(codes)
    try:
        train, test = fd.split(data, fd.SplitSpec(frac, seed=seed))
    except ConfigurationError:
        return
    assert len(np.intersect1d(train, test)) == 0 and len(train) + len(test) == len(codes)
    for c in set(codes):
        n_c = codes.count(c)
        assert abs((data.activity[train] == c).sum() - frac * n_c) < 1 + 1e-9


def test_split_is_deterministic():
    data = tiny_set([6] * 50 + [2] * 20)
    a = fd.split(data, fd.SplitSpec(0.6, seed=9))
    b = fd.split(data, fd.SplitSpec(0.6, seed=9))
    np.testing.assert_array_equal(a[0], b[0])


def test_split_by_trial_keeps_groups_together():
    data = tiny_set([6] * 120)
    train, test = fd.split(data, fd.SplitSpec(0.5, "by_trial", 1))
    groups = lambda idx: {(int(s), int(t)) for _, s, t, _ in data.provenance[idx]}  # noqa: E731
    assert not groups(train) & groups(test)


def test_split_empty_side_rejected():
    with pytest.raises(ConfigurationError):
        fd.split(tiny_set([6, 6]), fd.SplitSpec(0.1))
    with pytest.raises(ConfigurationError):
        fd.split(tiny_set([6] * 10), fd.SplitSpec(1.0))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def nearest_centroid_accuracy(data, train_frac=0.5, seed=0):
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(data))
    k = int(len(idx) * train_frac)
    tr, te = idx[:k], idx[k:]
    classes = np.unique(data.activity)
    cents = np.stack([data.X[tr][data.activity[tr] == c].mean(axis=0) for c in classes])
    d = ((data.X[te, None, :] - cents[None]) ** 2).sum(axis=2)
    return (classes[d.argmin(axis=1)] == data.activity[te]).mean()


def test_synth_separable_nearest_centroid_perfect():
    data = fd.synthesize_dataset(fd.SynthConfig(per_class_counts=[200] * 11, separation=5.0, seed=0))
    assert nearest_centroid_accuracy(data) == 1.0


def test_synth_tiny_separation_is_chance_level():
    data = fd.synthesize_dataset(fd.SynthConfig(per_class_counts=[200] * 11, separation=1e-6, seed=0))
    assert abs(nearest_centroid_accuracy(data) - 1 / 11) < 0.04


def test_synth_zero_separation_rejected():
    with pytest.raises(ConfigurationError):
        fd.synthesize_dataset(fd.SynthConfig(separation=0.0))


def test_synth_fall_fraction():
    data = fd.synthesize_dataset(fd.SynthConfig(n_samples=10000, fall_fraction=0.03, seed=1))
    assert abs(data.binary.mean() - 0.03) <= 0.005
    assert set(np.unique(data.multi[data.binary == 1])) == set(range(5))


def test_synth_labels_consistent():
    data = fd.synthesize_dataset(fd.SynthConfig(n_samples=1000, seed=4))
    amap = fd.ActivityMap()
    np.testing.assert_array_equal(data.binary, amap.binary(data.activity))
    np.testing.assert_array_equal(data.multi, amap.multi(data.activity))
    assert np.all(np.abs(data.X) <= 10)
