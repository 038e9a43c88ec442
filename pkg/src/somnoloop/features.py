"""Per-epoch feature extraction for sleep staging.

For every EEG channel in the epoch, 23 features across five families:

* time: mean, variance, skewness, kurtosis, zero-crossing rate,
  Hjorth mobility, Hjorth complexity
* frequency: relative power in the six canonical bands, 95% spectral edge,
  normalized spectral entropy
* time-frequency: Haar detail energies at decomposition levels 1-5
* linear: autocorrelation at 1 s lag
* non-linear: permutation entropy (order 3), Higuchi fractal dimension
  (kmax = 10)

Degenerate inputs follow one convention: any feature whose definition
divides by a vanishing variance or normalizes an all-zero distribution is 0.
Ratio- and distribution-valued features (relative powers, both entropies,
zero-crossing rate, spectral edge) are invariant under positive rescaling
of the signal; variance-family features scale with the square.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import analysis
from .core import SAMPLE_RATE_HZ
from .errors import DataError, ShapeError
from .protocol import ChannelId

HIGUCHI_KMAX = 10
PERMUTATION_ORDER = 3
WAVELET_LEVELS = 5
AUTOCORR_LAG = SAMPLE_RATE_HZ  # 1 s

CHANNEL_FEATURES = (
    "mean", "variance", "skewness", "kurtosis", "zero_cross_rate",
    "hjorth_mobility", "hjorth_complexity",
    "rel_delta", "rel_theta", "rel_alpha", "rel_sigma", "rel_beta", "rel_gamma",
    "spectral_edge_95", "spectral_entropy",
    "haar_d1", "haar_d2", "haar_d3", "haar_d4", "haar_d5",
    "autocorr_1s",
    "perm_entropy", "higuchi_fd",
)


@dataclass(frozen=True)
class FeatureVector:
    """Named, finite feature values; names map one-to-one onto indices."""

    names: Tuple[str, ...]
    values: np.ndarray
    context_k: int = 0
    context_filled: int = 0   # history blocks that existed (rest were repeats)

    def __post_init__(self):
        if len(self.names) != len(self.values):
            raise ShapeError(f"{len(self.names)} names for {len(self.values)} values")

    def asdict(self) -> Dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


# ---------------------------------------------------------------------------
# Family helpers

def _moments(x: np.ndarray) -> Tuple[float, float, float, float]:
    mean = float(np.mean(x))
    d = x - mean
    var = float(np.mean(d * d))
    if var <= 0.0:
        return mean, var, 0.0, 0.0
    m2 = var
    m3 = float(np.mean(d ** 3))
    m4 = float(np.mean(d ** 4))
    skew = m3 / m2 ** 1.5
    kurt = m4 / (m2 * m2) - 3.0
    return mean, var, skew, kurt


def _zero_cross_rate(x: np.ndarray) -> float:
    s = np.signbit(x)
    return float(np.count_nonzero(s[1:] != s[:-1])) / (len(x) - 1)


def _hjorth(x: np.ndarray) -> Tuple[float, float]:
    var0 = float(np.var(x))
    if var0 <= 0.0:
        return 0.0, 0.0
    dx = np.diff(x)
    var1 = float(np.var(dx))
    mobility = np.sqrt(var1 / var0)
    if var1 <= 0.0:
        return float(mobility), 0.0
    var2 = float(np.var(np.diff(dx)))
    complexity = np.sqrt(var2 / var1) / mobility
    return float(mobility), float(complexity)


def _spectral(est: analysis.SpectralEstimate) -> Tuple[List[float], float, float]:
    """Relative band powers, 95% spectral edge, normalized spectral entropy."""
    lo, hi = analysis.TOTAL_BAND
    mask = (est.frequencies >= lo) & (est.frequencies <= hi)
    p = est.power[mask]
    total = float(p.sum())
    rel = [analysis.bandpower(est, b_lo, b_hi)[1]
           for b_lo, b_hi in analysis.BANDS.values()]
    if total <= 0.0:
        return rel, 0.0, 0.0
    cum = np.cumsum(p)
    edge_idx = int(np.searchsorted(cum, 0.95 * total))
    edge = float(est.frequencies[mask][min(edge_idx, len(p) - 1)])
    q = p[p > 0] / total
    entropy = float(-(q * np.log(q)).sum() / np.log(len(p)))
    return rel, edge, entropy


def _haar_detail_energies(x: np.ndarray, levels: int = WAVELET_LEVELS) -> List[float]:
    """Total energy of the Haar detail coefficients at each level."""
    a = x
    energies = []
    for _ in range(levels):
        if len(a) % 2:
            a = a[:-1]
        even, odd = a[0::2], a[1::2]
        d = (even - odd) / np.sqrt(2.0)
        a = (even + odd) / np.sqrt(2.0)
        energies.append(float(np.sum(d * d)))
    return energies


def _autocorr(x: np.ndarray, lag: int = AUTOCORR_LAG) -> float:
    d = x - np.mean(x)
    denom = float(np.sum(d * d))
    if denom <= 0.0 or len(x) <= lag:
        return 0.0
    return float(np.sum(d[:-lag] * d[lag:])) / denom


def _permutation_entropy(x: np.ndarray, order: int = PERMUTATION_ORDER) -> float:
    """Normalized permutation entropy; ties resolved by stable position order."""
    windows = np.lib.stride_tricks.sliding_window_view(x, order)
    ranks = np.argsort(windows, axis=1, kind="stable")
    codes = np.zeros(len(windows), dtype=np.int64)
    for col in range(order):
        codes = codes * order + ranks[:, col]
    counts = np.bincount(codes)
    counts = counts[counts > 0]
    if len(counts) <= 1:
        return 0.0
    prob = counts / counts.sum()
    n_patterns = float(math.factorial(order))
    return float(-(prob * np.log(prob)).sum() / np.log(n_patterns))


def _higuchi_fd(x: np.ndarray, kmax: int = HIGUCHI_KMAX) -> float:
    n = len(x)
    lengths = []
    ks = []
    for k in range(1, kmax + 1):
        lk = 0.0
        for m in range(k):
            idx = np.arange(m, n, k)
            if len(idx) < 2:
                continue
            dist = float(np.sum(np.abs(np.diff(x[idx]))))
            norm = (n - 1) / (len(idx) - 1) / k
            lk += dist * norm / k
        lk /= k
        if lk <= 0.0:
            return 0.0
        lengths.append(np.log(lk))
        ks.append(np.log(1.0 / k))
    slope = np.polyfit(ks, lengths, 1)[0]
    return float(slope)


def channel_features(x: np.ndarray) -> np.ndarray:
    """The 23 per-channel features, in CHANNEL_FEATURES order."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite samples in feature input")
    if np.all(x == x[0]):
        # Mean subtraction on a constant at a non-representable level leaves
        # rounding residue that every variance-normalized feature would then
        # amplify; catch the constant exactly instead.
        out = np.zeros(len(CHANNEL_FEATURES))
        out[CHANNEL_FEATURES.index("mean")] = float(x[0])
        return out
    mean, var, skew, kurt = _moments(x)
    zcr = _zero_cross_rate(x)
    mob, comp = _hjorth(x)
    rel, edge, spec_ent = _spectral(analysis.welch_psd(x))
    haar = _haar_detail_energies(x)
    ac = _autocorr(x)
    pe = _permutation_entropy(x)
    hfd = _higuchi_fd(x)
    return np.array([mean, var, skew, kurt, zcr, mob, comp,
                     *rel, edge, spec_ent, *haar, ac, pe, hfd])


def extract_features(epoch) -> FeatureVector:
    """Joint feature vector over every channel present in the epoch."""
    names: List[str] = []
    chunks: List[np.ndarray] = []
    for channel in sorted(epoch.channels, key=int):
        cid = ChannelId(channel)
        names.extend(f"{cid.name}.{f}" for f in CHANNEL_FEATURES)
        chunks.append(channel_features(epoch.channels[channel]))
    if not chunks:
        raise DataError("epoch has no channels")
    return FeatureVector(tuple(names), np.concatenate(chunks))


def concat_context(current: FeatureVector, history: Sequence[FeatureVector],
                   k: int) -> FeatureVector:
    """Stack the k previous epochs' features in front of the current ones.

    Block order is oldest to newest with the current epoch last. When fewer
    than k previous epochs exist (start of the night), the earliest
    available block is repeated; ``context_filled`` records how many real
    history blocks went in.
    """
    if k < 0:
        raise ShapeError("context depth must be >= 0")
    if k == 0:
        return current
    for fv in history:
        if fv.names != current.names:
            raise ShapeError("history feature names do not match current epoch")
        if len(fv.values) != len(current.values):
            raise ShapeError(f"history dim {len(fv.values)} != {len(current.values)}")
    recent = list(history)[-k:]
    filled = len(recent)
    earliest = recent[0] if recent else current
    blocks = [earliest] * (k - filled) + recent + [current]
    names: List[str] = []
    for j, _ in enumerate(blocks[:-1]):
        offset = k - j
        names.extend(f"prev{offset}.{n}" for n in current.names)
    names.extend(current.names)
    values = np.concatenate([b.values for b in blocks])
    return FeatureVector(tuple(names), values, context_k=k, context_filled=filled)
