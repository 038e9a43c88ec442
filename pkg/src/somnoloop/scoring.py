"""Automatic sleep staging.

Pipeline: per-epoch features (see `features`), temporal context
concatenation, Boruta feature selection against per-column permutation
shadows, and a gradient-boosted tree classifier. Models persist as
self-describing files so prediction fails loudly when the feature contract
drifts.

Class imbalance is handled with inverse-frequency sample weights. Training
optionally augments the matrix with gain-rescaled copies (the closed-form
response of each feature to an amplitude change), which teaches the trees
to lean on scale-invariant features.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import joblib
import numpy as np
from scipy.stats import binom
from sklearn.ensemble import HistGradientBoostingClassifier, RandomForestClassifier

from . import recfiles
from .core import SleepStage
from .errors import DataError, LoadError, ModelContractError, TrainingError
from .features import FeatureVector, concat_context, extract_features

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
DEFAULT_CONTEXT_K = 4
REALTIME_BUDGET_MS = 30.0


# ---------------------------------------------------------------------------
# Boruta feature selection

@dataclass
class BorutaResult:
    confirmed: np.ndarray     # bool per feature
    tentative: np.ndarray
    rejected: np.ndarray
    hits: np.ndarray          # int per feature
    n_iterations: int

    @property
    def selected(self) -> np.ndarray:
        """Confirmed plus still-tentative features (tentative are kept)."""
        return self.confirmed | self.tentative


def boruta_select(X: np.ndarray, y: np.ndarray, n_iterations: int = 100,
                  alpha: float = 0.05, seed: int = 0,
                  n_estimators: int = 50, min_rows: int = 100,
                  n_jobs: int = 1, shadow_factor: int = 1) -> BorutaResult:
    """Confirm/reject features by racing them against permutation shadows.

    Each iteration appends a column-wise permuted copy of the still-active
    features, fits a random forest, and scores a hit for every real feature
    whose importance beats the best shadow. Shadows are padded to at least
    five columns (and ``shadow_factor`` copies of the active set) so the
    bar stays meaningful for small feature sets. Decisions use a two-sided
    binomial test at ``alpha`` with a Bonferroni correction across the
    feature set; undecided features stay tentative.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {X.shape}")
    if len(X) != len(y):
        raise DataError(f"{len(X)} rows but {len(y)} labels")
    if len(X) < min_rows:
        raise TrainingError(f"need at least {min_rows} labeled epochs, got {len(X)}")
    if len(np.unique(y)) < 2:
        raise TrainingError("labels contain a single class")

    rng = np.random.default_rng(seed)
    n_features = X.shape[1]
    hits = np.zeros(n_features, dtype=int)
    confirmed = np.zeros(n_features, dtype=bool)
    rejected = np.zeros(n_features, dtype=bool)
    threshold = alpha / (2.0 * n_features)

    iteration = 0
    for iteration in range(1, n_iterations + 1):
        active = ~rejected
        X_act = X[:, active]
        shadows = rng.permuted(X_act, axis=0)
        min_shadows = max(5, shadow_factor * X_act.shape[1])
        while shadows.shape[1] < min_shadows:
            shadows = np.hstack([shadows, rng.permuted(X_act, axis=0)])
        forest = RandomForestClassifier(
            n_estimators=n_estimators, max_depth=5, max_features="sqrt",
            random_state=int(rng.integers(2 ** 31)), n_jobs=n_jobs)
        forest.fit(np.hstack([X_act, shadows]), y)
        imp = forest.feature_importances_
        best_shadow = imp[X_act.shape[1]:].max()
        hits[np.flatnonzero(active)[imp[:X_act.shape[1]] > best_shadow]] += 1

        if iteration < 5:
            continue
        undecided = ~(confirmed | rejected)
        idx = np.flatnonzero(undecided)
        p_confirm = binom.sf(hits[idx] - 1, iteration, 0.5)
        p_reject = binom.cdf(hits[idx], iteration, 0.5)
        confirmed[idx[p_confirm < threshold]] = True
        rejected[idx[p_reject < threshold]] = True
        if not (~(confirmed | rejected)).any():
            break

    tentative = ~(confirmed | rejected)
    return BorutaResult(confirmed, tentative, rejected, hits, iteration)


# ---------------------------------------------------------------------------
# Model

@dataclass
class ScorerModel:
    """Trained stager: selection mask, trees, and the feature-name contract."""

    feature_names: Tuple[str, ...]
    mask: np.ndarray
    context_k: int
    classes: Tuple[int, ...]
    clf: HistGradientBoostingClassifier
    metadata: Dict = field(default_factory=dict)


def _sample_weights(y: np.ndarray) -> np.ndarray:
    classes, counts = np.unique(y, return_counts=True)
    weight_of = {c: len(y) / (len(classes) * n) for c, n in zip(classes, counts)}
    return np.array([weight_of[v] for v in y])


# Closed-form response of each per-channel feature to a gain change x -> c*x:
# mean scales by c, variance and Haar energies by c^2, everything else is
# (numerically) invariant.
_GAIN_POWER = {"mean": 1, "variance": 2, "haar_d1": 2, "haar_d2": 2,
               "haar_d3": 2, "haar_d4": 2, "haar_d5": 2}


def rescale_feature_rows(X: np.ndarray, names: Sequence[str], gains: np.ndarray) -> np.ndarray:
    """Feature matrix as it would look had each epoch been recorded at
    ``gains[i]`` times the amplitude."""
    out = np.array(X, dtype=np.float64, copy=True)
    for j, name in enumerate(names):
        power = _GAIN_POWER.get(name.rsplit(".", 1)[-1])
        if power:
            out[:, j] *= gains ** power
    return out


def train(X: np.ndarray, y: np.ndarray, feature_names: Sequence[str],
          context_k: int = DEFAULT_CONTEXT_K, seed: int = 0,
          run_boruta: bool = True, boruta_rows: int = 1000,
          augment_gain: bool = True, max_iter: int = 120) -> ScorerModel:
    """Fit the staging model; deterministic for a given seed."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    names = tuple(feature_names)
    if X.shape[1] != len(names):
        raise TrainingError(f"{X.shape[1]} columns but {len(names)} feature names")
    if len(np.unique(y)) < 2:
        raise TrainingError("labels contain a single class")

    rng = np.random.default_rng(seed)
    if augment_gain:
        gains = rng.uniform(0.5, 2.0, size=len(X))
        X = np.vstack([X, rescale_feature_rows(X, names, gains)])
        y = np.concatenate([y, y])

    if run_boruta:
        sel_rows = np.arange(len(X))
        if len(sel_rows) > boruta_rows:
            sel_rows = rng.choice(sel_rows, size=boruta_rows, replace=False)
        result = boruta_select(X[sel_rows], y[sel_rows], seed=seed, n_jobs=-1)
        mask = result.selected
        if not mask.any():
            raise TrainingError("feature selection rejected every feature")
    else:
        result = None
        mask = np.ones(len(names), dtype=bool)

    clf = HistGradientBoostingClassifier(random_state=seed, max_iter=max_iter,
                                         early_stopping=True)
    clf.fit(X[:, mask], y, sample_weight=_sample_weights(y))
    metadata = {
        "seed": seed,
        "trained_rows": int(len(X)),
        "augmented": bool(augment_gain),
        "boruta_iterations": result.n_iterations if result else 0,
        "n_confirmed": int(result.confirmed.sum()) if result else int(mask.sum()),
        "n_tentative": int(result.tentative.sum()) if result else 0,
    }
    return ScorerModel(names, mask, context_k, tuple(int(c) for c in clf.classes_),
                       clf, metadata)


def predict(model: ScorerModel, fv: FeatureVector) -> Tuple[SleepStage, np.ndarray]:
    """Stage plus the 5-class confidence vector (sums to 1).

    Ties resolve toward the earlier stage in W < N1 < N2 < N3 < REM order.
    """
    if fv.names != model.feature_names:
        raise ModelContractError(
            f"feature names do not match the model (got {len(fv.names)} names, "
            f"model has {len(model.feature_names)})")
    row = fv.values[model.mask].reshape(1, -1)
    probs = model.clf.predict_proba(row)[0]
    full = np.zeros(len(SleepStage))
    for p, cls in zip(probs, model.classes):
        full[cls] = p
    return SleepStage(int(np.argmax(full))), full


def save_model(model: ScorerModel, path: Path) -> Path:
    path = Path(path)
    joblib.dump({
        "format_version": MODEL_FORMAT_VERSION,
        "feature_names": list(model.feature_names),
        "mask": np.asarray(model.mask, dtype=bool),
        "context_k": model.context_k,
        "classes": list(model.classes),
        "clf": model.clf,
        "metadata": model.metadata,
    }, path)
    return path


def load_model(path: Path) -> ScorerModel:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"model file not found: {path}")
    try:
        blob = joblib.load(path)
    except Exception as exc:
        raise LoadError(f"cannot read model {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelContractError(f"{path}: unsupported model format")
    missing = {"feature_names", "mask", "context_k", "classes", "clf"} - set(blob)
    if missing:
        raise ModelContractError(f"{path}: model file missing fields {sorted(missing)}")
    return ScorerModel(tuple(blob["feature_names"]), np.asarray(blob["mask"], dtype=bool),
                       int(blob["context_k"]), tuple(blob["classes"]), blob["clf"],
                       blob.get("metadata", {}))


# ---------------------------------------------------------------------------
# Hypnogram

@dataclass
class Hypnogram:
    epoch_indices: np.ndarray
    stages: List[SleepStage]
    confidences: np.ndarray           # (n, 5), rows sum to 1

    def __post_init__(self):
        self.epoch_indices = np.asarray(self.epoch_indices, dtype=np.int64)
        self.confidences = np.asarray(self.confidences, dtype=float)
        n = len(self.epoch_indices)
        if len(self.stages) != n or self.confidences.shape != (n, len(SleepStage)):
            raise DataError("hypnogram fields disagree on epoch count")
        # 1e-5 keeps rows valid after a CSV round-trip at 6 decimals
        if n and not np.allclose(self.confidences.sum(axis=1), 1.0, atol=1e-5):
            raise DataError("confidence rows must sum to 1")

    def __len__(self) -> int:
        return len(self.epoch_indices)

    def write_csv(self, path: Path) -> None:
        recfiles.write_hypnogram_csv(path, self.epoch_indices.tolist(),
                                     self.stages, self.confidences)

    @classmethod
    def read_csv(cls, path: Path) -> "Hypnogram":
        idx, stages, confs = recfiles.read_hypnogram_csv(path)
        return cls(idx, stages, confs)


def score_epochs(epochs: Sequence, model: ScorerModel) -> Hypnogram:
    """Score an ordered epoch sequence; every epoch gets a line."""
    history: deque = deque(maxlen=max(model.context_k, 1))
    indices, stages, confs = [], [], []
    for epoch in epochs:
        base = extract_features(epoch)
        fv = concat_context(base, list(history), model.context_k)
        stage, probs = predict(model, fv)
        history.append(base)
        indices.append(epoch.epoch_index)
        stages.append(stage)
        confs.append(probs)
    return Hypnogram(np.array(indices, dtype=np.int64), stages,
                     np.array(confs).reshape(len(indices), len(SleepStage)))


# ---------------------------------------------------------------------------
# Real-time scorer

class RealtimeScorer:
    """Stateful per-session scorer fed one completed epoch at a time."""

    def __init__(self, model: ScorerModel, budget_ms: float = REALTIME_BUDGET_MS):
        if model is None:
            raise ModelContractError("no model loaded")
        self.model = model
        self.budget_ms = budget_ms
        self.elapsed_ms: List[float] = []
        self._history: deque = deque(maxlen=max(model.context_k, 1))

    @classmethod
    def from_file(cls, path: Path, budget_ms: float = REALTIME_BUDGET_MS) -> "RealtimeScorer":
        return cls(load_model(path), budget_ms)

    def score(self, epoch) -> Tuple[SleepStage, float, np.ndarray]:
        started = time.perf_counter()
        base = extract_features(epoch)
        fv = concat_context(base, list(self._history), self.model.context_k)
        stage, probs = predict(self.model, fv)
        elapsed = (time.perf_counter() - started) * 1000.0
        if elapsed > self.budget_ms:
            log.warning("real-time scoring took %.1f ms (budget %.0f ms)",
                        elapsed, self.budget_ms)
        self._history.append(base)
        self.elapsed_ms.append(elapsed)
        return stage, float(probs[int(stage)]), probs

    @property
    def mean_elapsed_ms(self) -> float:
        return float(np.mean(self.elapsed_ms)) if self.elapsed_ms else 0.0


def realtime_score(epoch, model: ScorerModel,
                   history: Sequence[FeatureVector] = (),
                   budget_ms: float = REALTIME_BUDGET_MS):
    """One-shot scoring path: features, context, predict, with timing.

    Returns (stage, confidence vector, elapsed_ms). Exceeding the budget
    logs a warning; the result is still returned.
    """
    if model is None:
        raise ModelContractError("no model loaded")
    started = time.perf_counter()
    base = extract_features(epoch)
    fv = concat_context(base, list(history), model.context_k)
    stage, probs = predict(model, fv)
    elapsed = (time.perf_counter() - started) * 1000.0
    if elapsed > budget_ms:
        log.warning("real-time scoring took %.1f ms (budget %.0f ms)", elapsed, budget_ms)
    return stage, probs, elapsed


# ---------------------------------------------------------------------------
# Synthetic training corpus

def build_corpus(epochs_per_stage: int = 500, seed: int = 0,
                 context_k: int = DEFAULT_CONTEXT_K, recipes=None,
                 run_len: int = 8) -> Tuple[np.ndarray, np.ndarray,
                                            Tuple[str, ...]]:
    """Stage-labeled feature matrix from the synthetic recipes.

    Epochs are generated as a night-like walk of ``run_len``-epoch stage
    runs, with the context history flowing across run boundaries. The
    transition rows this produces are what stops a model from leaning on
    the context features alone: trained on stage-pure context only, trees
    keep predicting the previous stage for context_k epochs after every
    real transition.
    """
    from .simulator import DEFAULT_RECIPES, synthesize_epoch
    recipes = recipes or DEFAULT_RECIPES
    rng = np.random.default_rng((seed, 0x5A4D))
    need = {stage: epochs_per_stage for stage in SleepStage}
    history: deque = deque(maxlen=max(context_k, 1))
    rows, labels = [], []
    names: Optional[Tuple[str, ...]] = None
    epoch_index = 0
    while any(need.values()):
        open_stages = [s for s in SleepStage if need[s]]
        stage = open_stages[int(rng.integers(len(open_stages)))]
        for _ in range(min(need[stage], max(1, run_len))):
            epoch = synthesize_epoch(recipes, stage, (seed, epoch_index),
                                     epoch_index=epoch_index)
            base = extract_features(epoch)
            fv = concat_context(base, list(history), context_k)
            history.append(base)
            if names is None:
                names = fv.names
            rows.append(fv.values)
            labels.append(int(stage))
            need[stage] -= 1
            epoch_index += 1
    return np.vstack(rows), np.array(labels, dtype=int), names


def save_corpus(path: Path, X: np.ndarray, y: np.ndarray,
                names: Sequence[str]) -> Path:
    path = Path(path)
    np.savez_compressed(path, X=X, y=y, names=np.array(list(names)))
    return path


def load_corpus(path: Path) -> Tuple[np.ndarray, np.ndarray, Tuple[str, ...]]:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"corpus not found: {path}")
    blob = np.load(path, allow_pickle=False)
    for key in ("X", "y", "names"):
        if key not in blob:
            raise LoadError(f"{path}: corpus missing array {key!r}")
    return blob["X"], blob["y"], tuple(str(n) for n in blob["names"])
