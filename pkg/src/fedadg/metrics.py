"""Accuracy and feature-alignment diagnostics.

MMD here is computed centrally by the simulator purely for evaluation; a real
federated deployment could not pool client features like this.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .networks import Classifier, DistributionGenerator, FeatureExtractor, sample_noise
from .tensor import Tensor, no_grad

MMD_TOLERANCE = 1e-9


def predict(F: FeatureExtractor, C: Classifier, x: np.ndarray) -> np.ndarray:
    """Argmax class; ``np.argmax`` breaks ties toward the lowest index."""
    with no_grad():
        logits = C(F(Tensor(x))).data
    return np.argmax(logits, axis=1)


def accuracy(F: FeatureExtractor, C: Classifier, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("accuracy of an empty dataset")
    return float(np.mean(predict(F, C, x) == np.asarray(y)))


def extract_features(F: FeatureExtractor, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return F(Tensor(x)).data.copy()


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b])
    if len(pooled) < 2:
        return 1.0
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def mmd_rbf(a: np.ndarray, b: np.ndarray, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) squared MMD with kernel exp(-d^2 / (2 bw^2)).

    The bandwidth defaults to the median pairwise distance of the pooled sample.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("mmd_rbf needs non-empty samples")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    bw = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    gamma = 1.0 / (2.0 * bw * bw)
    kaa = np.exp(-gamma * cdist(a, a, "sqeuclidean")).mean()
    kbb = np.exp(-gamma * cdist(b, b, "sqeuclidean")).mean()
    kab = np.exp(-gamma * cdist(a, b, "sqeuclidean")).mean()
    return float(kaa + kbb - 2.0 * kab)


def pairwise_mmd(feature_sets: Sequence[np.ndarray], bandwidth: float | None = None) -> np.ndarray:
    k = len(feature_sets)
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = mmd_rbf(feature_sets[i], feature_sets[j], bandwidth)
    return out


def mean_off_diagonal(m: np.ndarray) -> float:
    k = m.shape[0]
    mask = ~np.eye(k, dtype=bool)
    vals = m[mask]
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if vals.size else float("nan")


@dataclass
class AlignmentReport:
    pairwise: np.ndarray                    # [K, K] client-vs-client MMD
    to_reference: np.ndarray                # [K] client-vs-generated MMD (NaN without a reference)
    per_class: dict[int, np.ndarray] = field(default_factory=dict)
    per_class_reference: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def mean_pairwise(self) -> float:
        return mean_off_diagonal(self.pairwise)


def alignment_report(F: FeatureExtractor, client_data: Sequence[tuple[np.ndarray, np.ndarray]],
                     reference=None, *, rng: np.random.Generator | None = None,
                     per_class: bool = False, bandwidth: float | None = None) -> AlignmentReport:
    """Cross-client feature MMD and each client's distance to the reference.

    ``reference`` is either a :class:`DistributionGenerator` or a callable
    ``(labels, rng) -> features``; ``None`` skips the reference column. The
    reference batch has the same size and labels as the client batch. In
    per-class mode a class missing on either side leaves that cell NaN.
    """
    if len(client_data) < 2:
        raise ValueError("alignment_report needs at least 2 clients")
    rng = rng if rng is not None else np.random.default_rng(0)
    feats = [extract_features(F, x) for x, _ in client_data]
    labels = [np.asarray(y) for _, y in client_data]
    refs = None
    if reference is not None:
        refs = [_reference_batch(reference, y, rng) for y in labels]

    pairwise = pairwise_mmd(feats, bandwidth)
    to_ref = np.full(len(feats), np.nan)
    if refs is not None:
        to_ref = np.array([mmd_rbf(f, r, bandwidth) for f, r in zip(feats, refs)])
    report = AlignmentReport(pairwise, to_ref)

    if per_class:
        classes = sorted(set(np.concatenate(labels).tolist()))
        k = len(feats)
        for c in classes:
            m = np.full((k, k), np.nan)
            for i in range(k):
                m[i, i] = 0.0 if np.any(labels[i] == c) else np.nan
                for j in range(i + 1, k):
                    a, b = feats[i][labels[i] == c], feats[j][labels[j] == c]
                    if len(a) and len(b):
                        m[i, j] = m[j, i] = mmd_rbf(a, b, bandwidth)
            report.per_class[c] = m
            if refs is not None:
                r = np.full(k, np.nan)
                for i in range(k):
                    sel = labels[i] == c
                    if sel.any():
                        r[i] = mmd_rbf(feats[i][sel], refs[i][sel], bandwidth)
                report.per_class_reference[c] = r
    return report


def _reference_batch(reference, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if isinstance(reference, DistributionGenerator):
        z = sample_noise(rng, len(y), reference.noise_dim)
        with no_grad():
            return reference.generate(z, y).data.copy()
    return np.asarray(reference(y, rng), dtype=np.float64)
