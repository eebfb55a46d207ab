import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scorecal.data import EmbeddingSet, ScoreSet, TrialList
from scorecal.errors import ValidationError
from scorecal.scoring import score_trials
from scorecal.snorm import SIGMA_FLOOR, Cohort, NormStats, StatsCache, cohort_stats, snorm, snorm_scores, top_stats

from conftest import random_embeddings

rows = arrays(np.float64, (3, 12), elements=st.floats(-1, 1, allow_nan=False))


def test_top_stats_hand_example():
    mu, sd = top_stats([[0.8, 0.4]], 2)
    assert mu[0] == pytest.approx(0.6, abs=1e-15) and sd[0] == pytest.approx(0.2, abs=1e-15)


def test_constant_cohort_hits_floor():
    mu, sd = top_stats([[0.3] * 5], 3)
    assert mu[0] == pytest.approx(0.3) and sd[0] == SIGMA_FLOOR


def test_top_one_is_max():
    mu, sd = top_stats([[0.1, 0.9, -0.4]], 1)
    assert mu[0] == 0.9 and sd[0] == SIGMA_FLOOR


@given(rows, st.integers(1, 12))
def test_top_stats_matches_sorted_reference(m, x):
    mu, sd = top_stats(m, x)
    top = np.sort(m, axis=1)[:, -x:]
    np.testing.assert_allclose(mu, top.mean(axis=1), atol=1e-12)
    np.testing.assert_allclose(sd, np.maximum(np.sqrt(((top - top.mean(1, keepdims=True)) ** 2).mean(1)),
                                              SIGMA_FLOOR), atol=1e-12)


def test_top_x_out_of_range():
    with pytest.raises(ValidationError, match="top_x"):
        top_stats([[0.1, 0.2]], 3)
    with pytest.raises(ValidationError, match="top_x"):
        Cohort(EmbeddingSet(["c"], [[1.0]], [1.0]), top_x=0)
    with pytest.raises(ValidationError, match="empty"):
        Cohort(EmbeddingSet([], np.zeros((0, 2)), []), top_x=1)


def test_cohort_stats_on_constructed_cohort():
    # cohort cosines against u=[1,0] are exactly 0.8 and 0.4... up to rounding of the f32 store
    c = EmbeddingSet(["c1", "c2", "c3"], [[0.8, 0.6], [0.4, np.sqrt(1 - 0.16)], [-1.0, 0.0]], [1, 1, 1])
    st_ = cohort_stats(np.array([1.0, 0.0]), Cohort(c, top_x=2))
    assert isinstance(st_, NormStats)
    assert st_.mu == pytest.approx(0.6, abs=1e-7) and st_.sigma == pytest.approx(0.2, abs=1e-7)
    with pytest.raises(ValidationError, match="dimension"):
        cohort_stats(np.ones(3), Cohort(c, top_x=2))


def test_snorm_formula_examples():
    assert snorm_scores(0.37, 0.0, 1.0, 0.0, 1.0) == pytest.approx(0.37, abs=0)
    assert snorm_scores(0.5, 0.6, 0.2, 0.1, 0.1) == pytest.approx(1.75, abs=1e-12)


@given(st.floats(-1, 1), st.floats(-5, 5), rows)
def test_shift_cancels(s, c, m):
    m = m + np.linspace(0.0, 2.0, m.shape[1])  # keeps the top-5 spread well above the floor
    mu_e, sd_e = top_stats(m[:1], 5)
    mu_t, sd_t = top_stats(m[1:2], 5)
    mu_e2, sd_e2 = top_stats(m[:1] + c, 5)
    mu_t2, sd_t2 = top_stats(m[1:2] + c, 5)
    a = snorm_scores(s, mu_e, sd_e, mu_t, sd_t)
    b = snorm_scores(s + c, mu_e2, sd_e2, mu_t2, sd_t2)
    assert np.all(np.abs(a - b) <= 1e-10 * np.maximum(1.0, np.abs(a)))


@given(st.floats(-1, 1), st.floats(1e-6, 1), st.floats(-1, 1), st.floats(1e-6, 1), st.floats(1e-6, 0.5))
def test_monotone_in_raw_score(mu_e, sd_e, mu_t, sd_t, gap):
    lo = snorm_scores(0.0, mu_e, sd_e, mu_t, sd_t)
    hi = snorm_scores(gap, mu_e, sd_e, mu_t, sd_t)
    assert hi > lo


def test_snorm_swap_symmetry_and_cache(rng):
    emb = random_embeddings(rng, n=6, dim=5)
    cohort = Cohort(random_embeddings(rng, n=40, dim=5, prefix="c"), top_x=10)
    tl = TrialList(["u0", "u2", "u4"], ["u1", "u3", "u5"])
    rev = TrialList(tl.test_ids, tl.enroll_ids)
    a = snorm(tl, score_trials(emb, tl), emb, cohort)
    b = snorm(rev, score_trials(emb, rev), emb, cohort)
    assert a.stage == "snorm"
    np.testing.assert_allclose(a.scores, b.scores, atol=1e-14)
    cache = StatsCache(emb, cohort, chunk=2)
    c = snorm(tl, score_trials(emb, tl), emb, cohort, cache)
    np.testing.assert_array_equal(a.scores, c.scores)


def test_snorm_matches_per_trial_reference(rng):
    emb = random_embeddings(rng, n=5, dim=4)
    cohort = Cohort(random_embeddings(rng, n=30, dim=4, prefix="c"), top_x=7)
    tl = TrialList(["u0", "u1", "u3"], ["u2", "u4", "u0"])
    raw = score_trials(emb, tl)
    out = snorm(tl, raw, emb, cohort)
    for k, (e, t) in enumerate(zip(tl.enroll_ids, tl.test_ids)):
        se, stt = cohort_stats(emb[e].vector, cohort), cohort_stats(emb[t].vector, cohort)
        ref = 0.5 * ((raw.scores[k] - se.mu) / se.sigma + (raw.scores[k] - stt.mu) / stt.sigma)
        assert out.scores[k] == pytest.approx(ref, abs=1e-12)


def test_snorm_errors_and_overlap_warning(rng):
    emb = random_embeddings(rng, n=4, dim=3)
    cohort = Cohort(emb, top_x=2)
    tl = TrialList(["u0"], ["u1"])
    with pytest.warns(UserWarning, match="cohort"):
        snorm(tl, score_trials(emb, tl), emb, cohort)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ValidationError, match="scores for"):
            snorm(tl, ScoreSet(TrialList(["a", "b"], ["c", "d"]), [0.0, 1.0]), emb, cohort)
