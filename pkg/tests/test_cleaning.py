import json

import numpy as np
import pytest

from fallcascade import cleaning as cl
from fallcascade.data import ActivityMap, FeatureSet, SynthConfig, synthesize_dataset
from fallcascade.errors import ConfigurationError, DataError


def centroid_trainer(X, y, n_classes, seed):
    """Softmax over negative squared distances to class means; fast and deterministic."""
    cents = np.stack([X[y == c].mean(axis=0) for c in range(n_classes)])

    def predict(Z):
        d = -((Z[:, None, :] - cents[None]) ** 2).sum(axis=2)
        d -= d.max(axis=1, keepdims=True)
        e = np.exp(d)
        return e / e.sum(axis=1, keepdims=True)

    return predict


def blobs(n_per_class, n_classes, seed=0, sep=5.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=sep, size=(n_classes, 4))
    y = np.repeat(np.arange(n_classes), n_per_class)
    X = centers[y] + rng.normal(size=(len(y), 4))
    return X, y


def inject_noise(y, n_classes, rate, seed):
    rng = np.random.default_rng(seed)
    noisy = y.copy()
    idx = rng.choice(len(y), int(round(rate * len(y))), replace=False)
    noisy[idx] = (y[idx] + rng.integers(1, n_classes, len(idx))) % n_classes
    return noisy, idx


# ---------------------------------------------------------------------------
# cross-validated probabilities
# ---------------------------------------------------------------------------


def test_crossval_separable_two_classes_with_default_trainer():
    X, y = blobs(100, 2, seed=1)
    probs = cl.crossval_probs(X, y, 2, folds=3, seed=0)
    assert (probs.argmax(axis=1) == y).mean() >= 0.95
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_crossval_is_out_of_fold():
    X, y = blobs(20, 3)
    seen = []

    def spy(Xtr, ytr, n_classes, seed):
        rows = {tuple(r) for r in Xtr}

        def predict(Z):
            seen.append(any(tuple(r) in rows for r in Z))
            return np.full((len(Z), n_classes), 1 / n_classes)

        return predict

    cl.crossval_probs(X, y, 3, folds=4, trainer=spy)
    assert seen == [False] * 4


def test_crossval_rejects_one_fold():
    X, y = blobs(10, 2)
    with pytest.raises(ConfigurationError):
        cl.crossval_probs(X, y, 2, folds=1, trainer=centroid_trainer)


def test_crossval_rejects_singleton_class():
    X, y = blobs(10, 2)
    y = y.copy()
    y[0] = 2
    with pytest.raises(DataError):
        cl.crossval_probs(X, y, 3, folds=2, trainer=centroid_trainer)


def test_stratified_folds_balance():
    y = np.repeat([0, 1, 2], [10, 7, 23])
    folds = cl.stratified_folds(y, 5, seed=3)
    for c in range(3):
        counts = np.bincount(folds[y == c], minlength=5)
        assert counts.max() - counts.min() <= 1


# ---------------------------------------------------------------------------
# thresholds and flagging
# ---------------------------------------------------------------------------


def test_thresholds_uniform_model():
    probs = np.full((10, 5), 0.2)
    np.testing.assert_allclose(cl.class_thresholds(probs, np.arange(10) % 5), 0.2)


def test_thresholds_confident_model():
    eps = 1e-7
    probs = np.full((4, 2), eps)
    probs[[0, 1], 0] = probs[[2, 3], 1] = 1 - eps
    np.testing.assert_allclose(cl.class_thresholds(probs, [0, 0, 1, 1]), 1 - eps)


def test_thresholds_hand_computed():
    probs = np.array([[0.9, 0.1], [0.6, 0.4], [0.3, 0.7], [0.2, 0.8]])
    np.testing.assert_allclose(cl.class_thresholds(probs, [0, 0, 1, 0]), [(0.9 + 0.6 + 0.2) / 3, 0.7])


def test_thresholds_empty_class():
    with pytest.raises(DataError):
        cl.class_thresholds(np.full((3, 3), 1 / 3), [0, 1, 1])


def test_flag_rule():
    # classes: 0=HF, 1=KF; thresholds 0.8 / 0.9
    probs = np.array(
        [
            [0.99, 0.01],  # correct and confident
            [0.03, 0.97],  # given HF, predicted KF at 0.97 >= 0.9
            [0.15, 0.85],  # given HF, predicted KF but below 0.9
            [0.10, 0.90],  # exactly at threshold
        ]
    )
    rep = cl.flag_mislabeled(probs, [0, 0, 0, 0], [0.8, 0.9])
    np.testing.assert_array_equal(rep.flagged, [False, True, False, True])
    assert rep.counts[0, 1] == 2 and rep.counts.sum() == rep.n_flagged


def test_flag_invariant_holds():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(4), size=200)
    given = rng.integers(0, 4, 200)
    t = cl.class_thresholds(probs, given)
    rep = cl.flag_mislabeled(probs, given, t)
    f = rep.flagged
    assert np.all(rep.predicted[f] != given[f])
    assert np.all(rep.prob[f] >= t[rep.predicted[f]])


def test_flag_shape_mismatch():
    with pytest.raises(DataError):
        cl.flag_mislabeled(np.zeros((3, 2)), [0, 1], [0.5, 0.5])


# ---------------------------------------------------------------------------
# clean
# ---------------------------------------------------------------------------


def feature_set(n=8):
    amap = ActivityMap()
    codes = np.array([6, 7] * (n // 2))
    X = np.arange(n * 51, dtype=float).reshape(n, 51)
    prov = np.stack([np.ones(n, int), np.ones(n, int), np.ones(n, int), np.arange(n)], 1)
    return FeatureSet(X, codes, amap.binary(codes), amap.multi(codes), prov)


def report_for(flags):
    flags = np.asarray(flags, dtype=bool)
    n = len(flags)
    z = np.zeros(n, dtype=int)
    return cl.CleaningReport(z, z, np.zeros(n), flags, np.zeros(2), np.zeros((2, 2), int))


def test_clean_no_flags_is_identity():
    data = feature_set()
    out = cl.clean(data, report_for([False] * 8))
    np.testing.assert_array_equal(out.X, data.X)
    np.testing.assert_array_equal(out.activity, data.activity)


def test_clean_removes_flagged_and_keeps_order():
    data = feature_set()
    out = cl.clean(data, report_for([0, 1, 0, 0, 1, 0, 0, 1]))
    np.testing.assert_array_equal(out.provenance[:, 3], [0, 2, 3, 5, 6])
    np.testing.assert_array_equal(out.X, data.X[[0, 2, 3, 5, 6]])


def test_clean_all_flagged_warns():
    with pytest.warns(UserWarning):
        out = cl.clean(feature_set(), report_for([True] * 8))
    assert len(out) == 0


def test_clean_size_mismatch():
    with pytest.raises(RuntimeError):
        cl.clean(feature_set(), report_for([False] * 3))


# ---------------------------------------------------------------------------
# noise-injection oracle
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def synth11():
    data = synthesize_dataset(SynthConfig(per_class_counts=[60] * 11, separation=5.0, seed=11))
    given = data.activity - 1
    return data, given


def test_injected_noise_is_found(synth11):
    data, given = synth11
    noisy, bad = inject_noise(given, 11, 0.10, seed=4)
    rep = cl.find_label_issues(data.X, noisy, 11, folds=5, trainer=centroid_trainer)
    corrupted = np.zeros(len(noisy), bool)
    corrupted[bad] = True
    assert rep.flagged[corrupted].mean() >= 0.8
    assert rep.flagged[~corrupted].mean() <= 0.05


def test_clean_labels_flag_little(synth11):
    data, given = synth11
    rep = cl.find_label_issues(data.X, given, 11, folds=5, trainer=centroid_trainer)
    assert rep.flagged.mean() <= 0.02


def test_flagging_order_invariant(synth11):
    data, given = synth11
    noisy, _ = inject_noise(given, 11, 0.10, seed=5)
    perm = np.random.default_rng(9).permutation(len(noisy))
    a = cl.find_label_issues(data.X, noisy, 11, trainer=centroid_trainer)
    b = cl.find_label_issues(data.X[perm], noisy[perm], 11, trainer=centroid_trainer)
    keys = data.keys()
    assert {keys[i] for i in a.flagged_indices} == {keys[perm[i]] for i in b.flagged_indices}


def test_clean_feature_set_and_report_files(tmp_path, synth11):
    data, _ = synth11
    cleaned, rep = cl.clean_feature_set(data, range(1, 12), folds=3, trainer=centroid_trainer)
    assert len(cleaned) == len(data) - rep.n_flagged
    rep.write_csv(tmp_path / "c.csv")
    rep.write_json(tmp_path / "c.json")
    header = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert header == "index,given,predicted,prob,flagged"
    summary = json.loads((tmp_path / "c.json").read_text())
    assert summary["n_flagged"] == rep.n_flagged and len(summary["class_thresholds"]) == 11
