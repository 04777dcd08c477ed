"""
Trust scoring: normalised boundary distance, reversed normalised flipping
frequency, their harmonic combination, and a two-cluster trust split.

Higher is safer for every score here: a sample far from the boundary that
the model classifies from low-frequency content gets a trust score near 1.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .attacks import estimate_ddb, estimate_ddb_batch
from .errors import DegeneratePartitionError, PreconditionError, UndefinedMetricError
from .reports import write_csv, write_json
from .spectral import flipping_frequencies, flipping_frequency

EPS = 1e-5
DEGENERATE = 0.5

PROFILE_COLUMNS = ("sample_id", "class", "d_f", "censored", "F", "d_hat", "F_hat", "T", "cluster")


@dataclass
class RawFactors:
    sample_id: int
    d_f: float
    censored: bool
    F: int
    label: int = -1


@dataclass
class VulnerabilityProfile:
    sample_id: int
    d_f: float
    censored: bool
    F: int
    d_hat: float
    F_hat: float
    T: float
    label: int = -1
    cluster: str = ""

    def row(self):
        return {
            "sample_id": self.sample_id,
            "class": self.label,
            "d_f": self.d_f,
            "censored": int(self.censored),
            "F": self.F,
            "d_hat": self.d_hat,
            "F_hat": self.F_hat,
            "T": self.T,
            "cluster": self.cluster,
        }


@dataclass(frozen=True)
class NormalizationStats:
    """Min/max of the raw factors over a calibration set, frozen for test time."""

    min_ddb: float
    max_ddb: float
    min_F: float
    max_F: float

    def __post_init__(self):
        if self.max_ddb < self.min_ddb or self.max_F < self.min_F:
            raise PreconditionError("normalization stats need max >= min")

    @property
    def ddb_degenerate(self):
        return self.max_ddb == self.min_ddb

    @property
    def F_degenerate(self):
        return self.max_F == self.min_F

    def to_dict(self):
        d = asdict(self)
        d["ddb_degenerate"] = self.ddb_degenerate
        d["F_degenerate"] = self.F_degenerate
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["min_ddb"]), float(d["max_ddb"]), float(d["min_F"]), float(d["max_F"]))

    def save(self, path):
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_normalization(profiles):
    """Extract min/max of raw ``d_f`` and ``F`` from calibration profiles."""
    profiles = list(profiles)
    if len(profiles) < 2:
        raise PreconditionError("fit_normalization needs at least two profiles")
    d = np.array([p.d_f for p in profiles], dtype=np.float64)
    f = np.array([p.F for p in profiles], dtype=np.float64)
    return NormalizationStats(float(d.min()), float(d.max()), float(f.min()), float(f.max()))


def _scale(value, lo, hi):
    value = np.asarray(value, dtype=np.float64)
    if hi == lo:
        out = np.full(value.shape, DEGENERATE)
    else:
        out = np.clip((value - lo) / (hi - lo), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def normalize_ddb(d_f, stats):
    """Min-max scaled distance, clamped to ``[0, 1]``; 0.5 when the calibration range is empty."""
    return _scale(d_f, stats.min_ddb, stats.max_ddb)


def normalize_flipfreq(F, stats):
    """``1 - minmax(F)``: low-frequency reliance maps towards 1."""
    scaled = _scale(F, stats.min_F, stats.max_F)
    if stats.F_degenerate:
        return scaled
    return 1.0 - scaled


def trust_score(d_hat, F_hat, eps=EPS):
    """Harmonic combination ``2 d F / (d + F + eps)``."""
    d_hat = np.asarray(d_hat, dtype=np.float64)
    F_hat = np.asarray(F_hat, dtype=np.float64)
    out = 2.0 * d_hat * F_hat / (d_hat + F_hat + eps)
    return float(out) if out.ndim == 0 else out


def build_profile(raw, stats):
    d_hat = normalize_ddb(raw.d_f, stats)
    F_hat = normalize_flipfreq(raw.F, stats)
    return VulnerabilityProfile(
        raw.sample_id, float(raw.d_f), bool(raw.censored), int(raw.F),
        d_hat, F_hat, trust_score(d_hat, F_hat), raw.label,
    )


# ---------------------------------------------------------------------------
# trust partition


@dataclass
class TrustPartition:
    """Two clusters over 1-D scores; the larger centroid is the trust cluster."""

    centroids: tuple
    trust: np.ndarray
    sample_ids: np.ndarray

    @property
    def non_trust_centroid(self):
        return self.centroids[0]

    @property
    def trust_centroid(self):
        return self.centroids[1]

    @property
    def threshold(self):
        return 0.5 * (self.centroids[0] + self.centroids[1])

    def assign(self, scores):
        """Nearest-centroid assignment for new scores; ties go to trust."""
        return np.asarray(scores, dtype=np.float64) >= self.threshold

    def labels(self):
        return np.where(self.trust, "trust", "non_trust")

    def to_dict(self):
        return {
            "centroids": {"non_trust": self.centroids[0], "trust": self.centroids[1]},
            "threshold": self.threshold,
            "n_trust": int(self.trust.sum()),
            "n_non_trust": int((~self.trust).sum()),
            "assignment": {
                str(int(i)): ("trust" if t else "non_trust")
                for i, t in zip(self.sample_ids, self.trust)
            },
        }


def kmeans2(scores, sample_ids=None):
    """
    Two-means clustering of 1-D scores.

    In one dimension the optimal clusters are contiguous in sorted order, so
    every split point is scored from prefix sums and the lowest
    within-cluster sum of squares wins.  The result is a fixpoint of Lloyd's
    iteration (each point is nearest its own centroid), reached without the
    local optima that a (min, max) initialisation can get stuck in.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    n = s.shape[0]
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    if n < 2 or np.all(s == s[0]):
        raise DegeneratePartitionError("kmeans2 needs at least two distinct scores")
    order = np.argsort(s, kind="stable")
    ss = s[order]
    centered = ss - ss.mean()  # keeps the prefix-sum differences well conditioned
    csum = np.cumsum(centered)
    csq = np.cumsum(centered * centered)
    k = np.arange(1, n)  # size of the low cluster
    left_sse = csq[:-1] - csum[:-1] ** 2 / k
    right_n = n - k
    right_sum = csum[-1] - csum[:-1]
    right_sse = (csq[-1] - csq[:-1]) - right_sum**2 / right_n
    cost = left_sse + right_sse
    # only split between distinct values so equal scores share a cluster
    cost[ss[1:] == ss[:-1]] = np.inf
    cut = int(np.argmin(cost)) + 1
    low = ss[:cut].mean()
    high = ss[cut:].mean()
    trust = np.zeros(n, dtype=bool)
    trust[order[cut:]] = True
    return TrustPartition((float(low), float(high)), trust, ids)


def flagging_accuracy(partition, predictions, labels):
    """Percentage of flagged (non-trust) samples that the model gets wrong."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    flagged = ~partition.trust
    if predictions.shape != partition.trust.shape or labels.shape != partition.trust.shape:
        raise PreconditionError("predictions/labels must align with the partition")
    n = int(flagged.sum())
    if n == 0:
        raise UndefinedMetricError("flagging accuracy undefined: the non-trust cluster is empty")
    wrong = int((predictions[flagged] != labels[flagged]).sum())
    return 100.0 * wrong / n


# ---------------------------------------------------------------------------
# scoring


def raw_factors(model, images, attack_cfg, labels=None, sample_ids=None, threads=1):
    """Boundary distance and flipping frequency for every image."""
    images = np.asarray(images)
    n = images.shape[0]
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    labels = np.full(n, -1) if labels is None else np.asarray(labels)
    d_f, censored, _ = estimate_ddb_batch(model, images, attack_cfg, threads=threads)
    F = flipping_frequencies(model, images)
    return [
        RawFactors(int(ids[i]), float(d_f[i]), bool(censored[i]), int(F[i]), int(labels[i]))
        for i in range(n)
    ]


def score_sample(model, x, attack_cfg, stats, sample_id=0, label=-1):
    """Test-time path: attack + band stripping, frozen normalisation, trust score."""
    est = estimate_ddb(model, x, attack_cfg)
    F = flipping_frequency(model, x)
    return build_profile(RawFactors(sample_id, est.d_f, est.censored, F, label), stats)


def score_profiles(raws, stats):
    return [build_profile(r, stats) for r in raws]


def write_profiles(path, profiles):
    write_csv(path, [p.row() for p in profiles], PROFILE_COLUMNS)
