"""Feature selection, training, prediction, and the real-time scorer."""

import logging

import joblib
import numpy as np
import pytest

from somnoloop import scoring
from somnoloop.core import SleepStage
from somnoloop.errors import (
    DataError,
    LoadError,
    ModelContractError,
    TrainingError,
)
from somnoloop.scoring import (
    Hypnogram,
    RealtimeScorer,
    ScorerModel,
    boruta_select,
    build_corpus,
    load_corpus,
    load_model,
    predict,
    save_corpus,
    save_model,
    score_epochs,
    train,
)
from somnoloop.simulator import DEFAULT_RECIPES, synthesize_epoch


def perclass_standardize(e: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Remove the sample's accidental per-class location/scale structure.

    An i.i.d. noise column still carries frozen accidental correlations with
    the labels that a tree can exploit; standardizing within each class makes
    the column carry no class signal in the realized sample.
    """
    out = np.array(e, copy=True)
    for cls in np.unique(y):
        m = y == cls
        out[m] = (out[m] - out[m].mean()) / out[m].std()
    return out


def labeled_noise(seed: int, n: int = 1000, n_noise: int = 1):
    rng = np.random.default_rng((1234, seed))
    y = rng.integers(0, 2, size=n)
    noise = rng.standard_normal((n, n_noise))
    return y, noise


# ---------------------------------------------------------------------------
# Boruta

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_boruta_separates_signal_from_noise(seed):
    y, noise = labeled_noise(seed, n_noise=2)
    f1 = y + 0.5 * noise[:, 0]
    f2 = perclass_standardize(noise[:, 1], y)
    r = boruta_select(np.column_stack([f1, f2]), y, seed=seed)
    assert r.confirmed[0]
    assert r.rejected[1]
    assert not r.selected[1]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_boruta_keeps_duplicated_informative_feature(seed):
    y, noise = labeled_noise(seed)
    f1 = y + 0.5 * noise[:, 0]
    r = boruta_select(np.column_stack([f1, f1]), y, seed=seed)
    assert r.confirmed[0] or r.confirmed[1]


@pytest.mark.parametrize("seed", [0, 1])
def test_boruta_all_noise_confirms_nothing(seed):
    y, noise = labeled_noise(seed, n_noise=6)
    X = np.column_stack([perclass_standardize(noise[:, j], y) for j in range(6)])
    r = boruta_select(X, y, seed=seed)
    assert not r.confirmed.any()


def test_boruta_result_bookkeeping():
    y, noise = labeled_noise(3, n_noise=2)
    f1 = y + 0.5 * noise[:, 0]
    f2 = perclass_standardize(noise[:, 1], y)
    r = boruta_select(np.column_stack([f1, f2]), y, seed=3, n_iterations=40)
    assert not np.any(r.confirmed & r.rejected)
    assert np.array_equal(r.tentative, ~(r.confirmed | r.rejected))
    assert 1 <= r.n_iterations <= 40
    assert np.all(r.hits >= 0) and np.all(r.hits <= r.n_iterations)


def test_boruta_input_validation():
    y, noise = labeled_noise(0)
    with pytest.raises(DataError):
        boruta_select(noise[:, 0], y)
    with pytest.raises(DataError):
        boruta_select(noise, y[:-1])
    with pytest.raises(TrainingError):
        boruta_select(noise[:50], y[:50])
    with pytest.raises(TrainingError):
        boruta_select(noise, np.zeros(len(y), dtype=int))


# ---------------------------------------------------------------------------
# Corpus

def test_build_corpus_shapes_and_balance():
    X, y, names = build_corpus(epochs_per_stage=4, seed=5)
    assert X.shape == (4 * len(SleepStage), len(names))
    classes, counts = np.unique(y, return_counts=True)
    assert sorted(classes) == [int(s) for s in SleepStage]
    assert np.all(counts == 4)
    assert any(n.startswith("prev4.") for n in names)
    assert any(n.startswith("EEG_L.") for n in names)


def test_build_corpus_deterministic():
    a = build_corpus(epochs_per_stage=3, seed=9)
    b = build_corpus(epochs_per_stage=3, seed=9)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])
    assert a[2] == b[2]


def test_corpus_file_round_trip(tmp_path):
    X, y, names = build_corpus(epochs_per_stage=2, seed=1)
    path = save_corpus(tmp_path / "corpus.npz", X, y, names)
    X2, y2, names2 = load_corpus(path)
    assert np.array_equal(X, X2)
    assert np.array_equal(y, y2)
    assert names2 == names


# ---------------------------------------------------------------------------
# Training and prediction

def test_train_validation(small_corpus):
    X, y, names = small_corpus
    with pytest.raises(TrainingError):
        train(X, y, names[:-1], run_boruta=False)
    with pytest.raises(TrainingError):
        train(X, np.zeros(len(y), dtype=int), names, run_boruta=False)


def test_train_deterministic(small_corpus):
    X, y, names = small_corpus
    a = train(X, y, names, seed=3, run_boruta=False)
    b = train(X, y, names, seed=3, run_boruta=False)
    probe = X[:20][:, a.mask]
    assert np.array_equal(a.clf.predict_proba(probe), b.clf.predict_proba(probe))


def test_trained_model_fits_its_corpus(small_model, small_corpus):
    X, y, _ = small_corpus
    hat = small_model.clf.predict(X[:, small_model.mask])
    assert np.mean(hat == y) > 0.85
    assert small_model.mask.sum() >= 1
    assert small_model.metadata["n_confirmed"] >= 1


def test_predict_contract_and_confidences(small_model, small_corpus):
    X, _, names = small_corpus
    from somnoloop.features import FeatureVector
    fv = FeatureVector(tuple(names), X[0])
    stage, probs = predict(small_model, fv)
    assert isinstance(stage, SleepStage)
    assert probs.shape == (len(SleepStage),)
    assert probs.sum() == pytest.approx(1.0, abs=1e-6)
    assert probs[int(stage)] == probs.max()
    with pytest.raises(ModelContractError):
        predict(small_model, FeatureVector(("wrong",) * len(names), X[0]))


class _TieProba:
    """predict_proba stub returning an exact two-way tie."""

    def predict_proba(self, row):
        return np.array([[0.5, 0.5]])


def test_predict_tie_breaks_toward_earlier_stage():
    model = ScorerModel(feature_names=("f",), mask=np.array([True]),
                        context_k=0, classes=(int(SleepStage.REM), int(SleepStage.W)),
                        clf=_TieProba())
    from somnoloop.features import FeatureVector
    stage, probs = predict(model, FeatureVector(("f",), np.zeros(1)))
    assert stage == SleepStage.W
    assert probs[int(SleepStage.W)] == probs[int(SleepStage.REM)] == 0.5


# ---------------------------------------------------------------------------
# Persistence

def test_model_file_round_trip(tmp_path, small_model, small_corpus):
    X, _, _ = small_corpus
    path = save_model(small_model, tmp_path / "model.joblib")
    loaded = load_model(path)
    assert loaded.feature_names == small_model.feature_names
    assert np.array_equal(loaded.mask, small_model.mask)
    assert loaded.context_k == small_model.context_k
    assert loaded.classes == small_model.classes
    probe = X[:10][:, small_model.mask]
    assert np.array_equal(loaded.clf.predict_proba(probe),
                          small_model.clf.predict_proba(probe))


def test_load_model_failures(tmp_path, small_model):
    with pytest.raises(LoadError):
        load_model(tmp_path / "absent.joblib")
    garbage = tmp_path / "garbage.joblib"
    garbage.write_text("not a model")
    with pytest.raises(LoadError):
        load_model(garbage)
    wrong_version = tmp_path / "old.joblib"
    joblib.dump({"format_version": 999}, wrong_version)
    with pytest.raises(ModelContractError):
        load_model(wrong_version)
    incomplete = tmp_path / "incomplete.joblib"
    joblib.dump({"format_version": scoring.MODEL_FORMAT_VERSION,
                 "feature_names": []}, incomplete)
    with pytest.raises(ModelContractError):
        load_model(incomplete)


# ---------------------------------------------------------------------------
# Offline and real-time scoring agree

def stage_run(stage, n, base_seed=20):
    return [synthesize_epoch(DEFAULT_RECIPES, stage, (base_seed, i), epoch_index=i)
            for i in range(n)]


def test_score_epochs_against_realtime(small_model):
    epochs = stage_run(SleepStage.N2, 6)
    hyp = score_epochs(epochs, small_model)
    assert len(hyp) == 6
    assert np.array_equal(hyp.epoch_indices, np.arange(6))
    assert np.allclose(hyp.confidences.sum(axis=1), 1.0, atol=1e-6)

    rt = RealtimeScorer(small_model)
    for i, epoch in enumerate(epochs):
        stage, conf, probs = rt.score(epoch)
        assert stage == hyp.stages[i]
        assert np.array_equal(probs, hyp.confidences[i])
        assert conf == probs[int(stage)]
    assert len(rt.elapsed_ms) == 6
    assert rt.mean_elapsed_ms > 0


def test_scorer_identifies_stage_runs(small_model):
    for stage in (SleepStage.N2, SleepStage.N3):
        hyp = score_epochs(stage_run(stage, 8, base_seed=33), small_model)
        hits = sum(1 for s in hyp.stages if s == stage)
        assert hits >= 6, f"{stage.name}: {[s.name for s in hyp.stages]}"


def test_realtime_budget_warning(small_model, caplog, n2_epoch):
    rt = RealtimeScorer(small_model, budget_ms=1e-6)
    with caplog.at_level(logging.WARNING, logger="somnoloop.scoring"):
        stage, conf, probs = rt.score(n2_epoch)
    assert "budget" in caplog.text
    assert probs.sum() == pytest.approx(1.0, abs=1e-6)


def test_realtime_scorer_from_file(tmp_path, small_model, n2_epoch):
    path = save_model(small_model, tmp_path / "m.joblib")
    rt = RealtimeScorer.from_file(path, budget_ms=50.0)
    stage, conf, probs = rt.score(n2_epoch)
    assert rt.budget_ms == 50.0
    assert 0.0 <= conf <= 1.0
    with pytest.raises(ModelContractError):
        RealtimeScorer(None)


# ---------------------------------------------------------------------------
# Hypnogram container

def test_hypnogram_validation():
    good = Hypnogram(np.arange(2), [SleepStage.W, SleepStage.N2],
                     np.array([[1, 0, 0, 0, 0], [0, 0, 1, 0, 0]], dtype=float))
    assert len(good) == 2
    with pytest.raises(DataError):
        Hypnogram(np.arange(2), [SleepStage.W],
                  np.array([[1, 0, 0, 0, 0], [0, 0, 1, 0, 0]], dtype=float))
    with pytest.raises(DataError):
        Hypnogram(np.arange(1), [SleepStage.W],
                  np.array([[0.5, 0, 0, 0, 0]]))


def test_hypnogram_csv_round_trip(tmp_path, small_model):
    hyp = score_epochs(stage_run(SleepStage.N3, 3), small_model)
    path = tmp_path / "hypnogram.csv"
    hyp.write_csv(path)
    back = Hypnogram.read_csv(path)
    assert back.stages == hyp.stages
    assert np.array_equal(back.epoch_indices, hyp.epoch_indices)
    assert np.allclose(back.confidences, hyp.confidences, atol=1e-6)
