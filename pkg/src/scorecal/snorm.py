"""Adaptive symmetric score normalization (s-norm) with a top-X cohort.

For a trial (e, t) with raw score s, each side is scored against the cohort,
the ``top_x`` highest cohort scores are kept, and

    s_norm = 0.5 * ((s - mu_e) / sigma_e + (s - mu_t) / sigma_t)

Standard deviations are population (divide by ``top_x``) and floored at
``SIGMA_FLOOR`` so degenerate cohorts never divide by zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import EmbeddingSet, ScoreSet, TrialList
from .errors import ValidationError
from .scoring import length_normalize

SIGMA_FLOOR = 1e-6
DEFAULT_TOP_X = 200


@dataclass(frozen=True)
class NormStats:
    mu: float
    sigma: float


@dataclass(frozen=True)
class Cohort:
    embeddings: EmbeddingSet
    top_x: int = DEFAULT_TOP_X

    def __post_init__(self):
        if len(self.embeddings) == 0:
            raise ValidationError("cohort is empty")
        if not 1 <= self.top_x <= len(self.embeddings):
            raise ValidationError(f"top_x={self.top_x} must be between 1 and the cohort size "
                                  f"{len(self.embeddings)}")


def top_stats(cohort_scores, top_x: int, sigma_floor: float = SIGMA_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Mean and floored population std of the ``top_x`` largest entries of each row."""
    s = np.atleast_2d(np.asarray(cohort_scores, dtype=np.float64))
    if not 1 <= top_x <= s.shape[1]:
        raise ValidationError(f"top_x={top_x} must be between 1 and the cohort size {s.shape[1]}")
    top = np.partition(s, s.shape[1] - top_x, axis=1)[:, s.shape[1] - top_x:]
    mu = top.mean(axis=1)
    sigma = np.maximum(top.std(axis=1), sigma_floor)
    return mu, sigma


def cohort_stats(u, cohort: Cohort) -> NormStats:
    """Score ``u`` against every cohort member and summarize the top scores."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (cohort.embeddings.dim,):
        raise ValidationError(f"dimension mismatch: {u.shape} vs cohort dimension {cohort.embeddings.dim}")
    scores = length_normalize(cohort.embeddings.vectors) @ length_normalize(u)
    mu, sigma = top_stats(scores, cohort.top_x)
    return NormStats(float(mu[0]), float(sigma[0]))


def snorm_scores(raw, enroll_mu, enroll_sigma, test_mu, test_sigma) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    return 0.5 * ((raw - enroll_mu) / enroll_sigma + (raw - test_mu) / test_sigma)


class StatsCache:
    """Per-utterance NormStats computed on demand and memoized by (id, side).

    ``side_scorer(side, rows)`` must return a (len(rows), cohort size) matrix of
    cohort scores for the given utterance rows; the default is plain cosine,
    symmetric in the two sides.
    """

    def __init__(self, embeddings: EmbeddingSet, cohort: Cohort,
                 side_scorer: Callable[[str, np.ndarray], np.ndarray] | None = None,
                 chunk: int = 2048):
        self.embeddings = embeddings
        self.cohort = cohort
        self.chunk = chunk
        self._scorer = side_scorer or self._cosine_scorer
        self._cohort_unit = length_normalize(cohort.embeddings.vectors)
        self._cache: dict[tuple[str, str], tuple[float, float]] = {}

    def _cosine_scorer(self, side: str, rows: np.ndarray) -> np.ndarray:
        return length_normalize(self.embeddings.vectors[rows]) @ self._cohort_unit.T

    def stats(self, ids, side: str) -> tuple[np.ndarray, np.ndarray]:
        ids = list(ids)
        todo = sorted({u for u in ids if (u, side) not in self._cache}, key=self.embeddings.index.get)
        rows_all = self.embeddings.rows(todo)
        for start in range(0, len(todo), self.chunk):
            rows = rows_all[start:start + self.chunk]
            mu, sigma = top_stats(self._scorer(side, rows), self.cohort.top_x)
            for k, r in enumerate(rows):
                self._cache[(self.embeddings.ids[r], side)] = (mu[k], sigma[k])
        vals = np.array([self._cache[(u, side)] for u in ids]).reshape(-1, 2)
        return vals[:, 0], vals[:, 1]


def snorm(trials: TrialList, raw: ScoreSet, embeddings: EmbeddingSet, cohort: Cohort,
          cache: StatsCache | None = None) -> ScoreSet:
    """Adaptive s-norm of cosine trial scores."""
    if len(raw) != len(trials):
        raise ValidationError(f"{len(raw)} scores for {len(trials)} trials")
    _warn_overlap(trials, cohort)
    cache = cache or StatsCache(embeddings, cohort)
    # resolve ids first so errors name the trial
    embeddings.rows(trials.enroll_ids, "enroll id")
    embeddings.rows(trials.test_ids, "test id")
    mu_e, sd_e = cache.stats(trials.enroll_ids, "enroll")
    mu_t, sd_t = cache.stats(trials.test_ids, "test")
    return ScoreSet(trials, snorm_scores(raw.scores, mu_e, sd_e, mu_t, sd_t), "snorm")


def _warn_overlap(trials: TrialList, cohort: Cohort) -> None:
    shared = (set(trials.enroll_ids) | set(trials.test_ids)) & set(cohort.embeddings.index)
    if shared:
        warnings.warn(f"{len(shared)} cohort utterances also appear in the trial list", UserWarning,
                      stacklevel=3)
