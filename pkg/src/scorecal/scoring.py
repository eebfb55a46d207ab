"""Cosine trial scoring."""

from __future__ import annotations

import numpy as np

from .data import EmbeddingSet, ScoreSet, TrialList
from .errors import ValidationError


def length_normalize(v) -> np.ndarray:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValidationError("degenerate embedding: zero vector cannot be length-normalized")
    return v / norm


def cosine_score(e, t) -> float:
    e = np.asarray(e, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if e.shape != t.shape:
        raise ValidationError(f"dimension mismatch: {e.shape} vs {t.shape}")
    return float(np.dot(length_normalize(e), length_normalize(t)))


def pair_cosines(e_rows: np.ndarray, t_rows: np.ndarray) -> np.ndarray:
    """Row-wise cosine between two equally shaped matrices."""
    return np.einsum("ij,ij->i", length_normalize(e_rows), length_normalize(t_rows))


def score_trials(embeddings: EmbeddingSet, trials: TrialList) -> ScoreSet:
    """Raw cosine score for every trial, in trial order."""
    ei = embeddings.rows(trials.enroll_ids, "enroll id")
    ti = embeddings.rows(trials.test_ids, "test id")
    unit = _unit_rows(embeddings)
    scores = np.einsum("ij,ij->i", unit[ei], unit[ti])
    return ScoreSet(trials, scores, "cosine")


def _unit_rows(embeddings: EmbeddingSet) -> np.ndarray:
    norms = np.linalg.norm(embeddings.vectors, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValidationError(f"degenerate embedding: {embeddings.ids[zero[0]]!r} is a zero vector")
    return embeddings.vectors / norms[:, None]
