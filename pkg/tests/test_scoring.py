import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scorecal.data import EmbeddingSet, TrialList
from scorecal.errors import ValidationError
from scorecal.scoring import cosine_score, length_normalize, score_trials

from conftest import random_embeddings

vec = arrays(np.float64, 5, elements=st.floats(-100, 100, allow_nan=False))


def test_length_normalize_examples():
    np.testing.assert_allclose(length_normalize([3.0, 4.0]), [0.6, 0.8], rtol=0, atol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(length_normalize(u), u)
    with pytest.raises(ValidationError, match="degenerate"):
        length_normalize([0.0, 0.0])


@pytest.mark.parametrize("e, t, expected", [
    ([1, 0], [1, 0], 1.0),
    ([1, 0], [0, 1], 0.0),
    ([1, 1], [1, 0], 1 / math.sqrt(2)),
])
def test_cosine_examples(e, t, expected):
    assert cosine_score(e, t) == pytest.approx(expected, abs=1e-8)


def test_cosine_dimension_mismatch():
    with pytest.raises(ValidationError, match="dimension"):
        cosine_score([1, 0], [1, 0, 0])


@given(vec, vec)
def test_cosine_symmetric_exactly(e, t):
    assume(np.linalg.norm(e) > 1e-3 and np.linalg.norm(t) > 1e-3)
    assert cosine_score(e, t) == cosine_score(t, e)


@given(vec, vec, st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(e, t, k):
    assume(np.linalg.norm(e) > 1e-3 and np.linalg.norm(t) > 1e-3)
    assert abs(cosine_score(k * e, t) - cosine_score(e, t)) <= 1e-12


def test_identical_embeddings_score_one():
    emb = EmbeddingSet(["a", "b"], [[0.3, -2.0, 1.0], [0.3, -2.0, 1.0]], [1.0, 1.0])
    assert score_trials(emb, TrialList(["a"], ["b"])).scores[0] == pytest.approx(1.0, abs=1e-15)


def test_score_trials_matches_loop_and_reversal(rng):
    emb = random_embeddings(rng, n=8, dim=6)
    pairs = [(emb.ids[i], emb.ids[j]) for i, j in rng.integers(0, 8, (30, 2)) if i != j]
    pairs = list(dict.fromkeys(pairs))[:10]
    tl = TrialList([p[0] for p in pairs], [p[1] for p in pairs])
    got = score_trials(emb, tl)
    assert got.stage == "cosine"
    loop = [cosine_score(emb[e].vector, emb[t].vector) for e, t in pairs]
    np.testing.assert_allclose(got.scores, loop, rtol=0, atol=1e-14)
    rev = score_trials(emb, TrialList([p[1] for p in pairs], [p[0] for p in pairs]))
    np.testing.assert_array_equal(rev.scores, got.scores)


def test_score_trials_permutation_equivariant(rng):
    emb = random_embeddings(rng, n=7, dim=3)
    tl = TrialList([emb.ids[k] for k in range(6)], [emb.ids[k + 1] for k in range(6)])
    perm = rng.permutation(6)
    np.testing.assert_array_equal(score_trials(emb, tl.take(perm)).scores, score_trials(emb, tl).scores[perm])


def test_score_trials_unknown_id_names_trial(rng):
    emb = random_embeddings(rng, n=3)
    with pytest.raises(ValidationError, match="trial 2"):
        score_trials(emb, TrialList(["u0", "u1"], ["u1", "nope"]))


def test_zero_vector_names_utterance():
    emb = EmbeddingSet(["a", "z"], [[1.0, 0.0], [0.0, 0.0]], [1.0, 1.0])
    with pytest.raises(ValidationError, match="'z'"):
        score_trials(emb, TrialList(["a"], ["z"]))
