import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize, minimize_scalar

from scorecal.data import ScoreSet
from scorecal.errors import CalibrationWarning, FormatError, ValidationError
from scorecal.linear import (CLLR, LinearCalibration, Objective, apply_affine, cllr, cllr_arrays,
                             objective_and_grad, train_linear, train_scale, weighted_bce, weighted_bce_arrays)
from scorecal.modelfile import model_lines, parse_fields, model_from_fields

from conftest import labeled_scores

LN2 = math.log(2.0)
scores_st = arrays(np.float64, st.integers(1, 30), elements=st.floats(-20, 20, allow_nan=False))


def _ref_loss(l_t, l_n, pi=None):
    sp = lambda x: np.logaddexp(0.0, x)  # noqa: E731
    if pi is None:
        return (np.mean(sp(-l_t)) + np.mean(sp(l_n))) / (2 * LN2)
    off = math.log(pi / (1 - pi))
    return pi * np.mean(sp(-(l_t + off))) + (1 - pi) * np.mean(sp(l_n + off))


def test_apply_affine_examples():
    s = labeled_scores([0.5, 1.0], [-1.0])
    out = apply_affine(s, LinearCalibration(2.0, -1.0))
    assert out.scores[0] == 0.0 and out.stage == "affine"
    np.testing.assert_array_equal(apply_affine(s, LinearCalibration(1.0, 0.0)).scores, s.scores)
    np.testing.assert_allclose(LinearCalibration(3.0, 0.5)(np.array([-1.0, 0.0, 1.0])), [-2.5, 0.5, 3.5])


def test_weighted_bce_examples():
    assert weighted_bce(labeled_scores([0.0, 0.0], [0.0]), 0.5) == pytest.approx(LN2, abs=1e-15)
    assert weighted_bce_arrays(np.array([50.0]), np.array([-50.0]), 0.5) < 1e-20
    got = weighted_bce(labeled_scores([2.0, -1.0], [0.0]), 0.5)
    want = 0.5 * np.mean([math.log1p(math.exp(-2)), math.log1p(math.exp(1))]) + 0.5 * LN2
    assert got == pytest.approx(want, abs=1e-15)


def test_cllr_examples():
    assert cllr(labeled_scores([0.0, 0.0, 0.0], [0.0, 0.0])) == pytest.approx(1.0, abs=1e-15)
    assert cllr(labeled_scores([50.0], [-50.0])) < 1e-15
    assert cllr(labeled_scores([1.0], [-1.0])) == pytest.approx(math.log2(1 + math.exp(-1)), abs=1e-15)


@given(scores_st, scores_st)
def test_bce_half_prior_is_ln2_cllr(t, n):
    assert weighted_bce_arrays(t, n, 0.5) == pytest.approx(LN2 * cllr_arrays(t, n), abs=1e-12)


@given(scores_st, scores_st, st.floats(0.01, 0.99))
def test_losses_match_reference(t, n, pi):
    assert cllr_arrays(t, n) == pytest.approx(_ref_loss(t, n), rel=1e-12, abs=1e-300)
    assert weighted_bce_arrays(t, n, pi) == pytest.approx(_ref_loss(t, n, pi), rel=1e-12, abs=1e-300)


@given(scores_st, scores_st, st.tuples(st.floats(-3, 3), st.floats(-3, 3)),
       st.tuples(st.floats(-3, 3), st.floats(-3, 3)), st.sampled_from(["cllr", "weighted_bce(0.05)"]))
def test_losses_convex_in_affine_params(t, n, p, q, obj):
    obj = Objective.parse(obj)

    def f(a, b):
        l = np.r_[a * t + b, a * n + b]
        return objective_and_grad(l, np.r_[np.ones(t.size, bool), np.zeros(n.size, bool)], obj)[0]

    mid = f((p[0] + q[0]) / 2, (p[1] + q[1]) / 2)
    assert mid <= (f(*p) + f(*q)) / 2 + 1e-12


def test_gradient_matches_finite_differences(rng):
    l = rng.normal(size=12)
    is_t = np.arange(12) % 3 == 0
    for obj in (CLLR, Objective("weighted_bce", 0.2)):
        _, g = objective_and_grad(l, is_t, obj)
        for k in range(12):
            d = np.zeros(12)
            d[k] = 1e-6
            fd = (objective_and_grad(l + d, is_t, obj)[0] - objective_and_grad(l - d, is_t, obj)[0]) / 2e-6
            assert g[k] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_objective_parse_round_trip():
    assert str(Objective.parse("weighted_bce(0.05)")) == "weighted_bce(0.05)"
    assert Objective.parse("cllr") == CLLR
    for bad in ("bce", "weighted_bce(1.5)", "weighted_bce(x)"):
        with pytest.raises(ValidationError):
            Objective.parse(bad)


def _s1(n=10_000, seed=7):
    rng = np.random.default_rng(seed)
    return labeled_scores(rng.normal(1, 1, n), rng.normal(-1, 1, n))


def test_recovers_analytic_llr_slope():
    cal = train_linear(_s1())
    assert abs(cal.alpha - 2.0) <= 0.05 * 2.0
    assert abs(cal.beta) <= 0.05
    assert cal.grad_norm <= 1e-9


@pytest.mark.parametrize("obj", ["cllr", "weighted_bce(0.05)", "weighted_bce(0.5)"])
def test_matches_independent_optimizer(obj):
    s = _s1(2000, seed=3)
    tar, non = s.split()
    o = Objective.parse(obj)
    pi = None if o.kind == "cllr" else o.prior
    res = minimize(lambda p: _ref_loss(p[0] * tar + p[1], p[0] * non + p[1], pi), [1.0, 0.0],
                   method="Nelder-Mead", options=dict(xatol=1e-10, fatol=1e-14, maxiter=5000))
    cal = train_linear(s, obj)
    assert cal.alpha == pytest.approx(res.x[0], abs=1e-5)
    assert cal.beta == pytest.approx(res.x[1], abs=1e-5)


def test_prescaled_scores():
    s = _s1(5000, seed=1)
    a = train_linear(s)
    b = train_linear(s.with_scores(10 * s.scores, "x10"))
    assert b.alpha == pytest.approx(a.alpha / 10, rel=1e-6)
    np.testing.assert_allclose(b(10 * s.scores), a(s.scores), atol=1e-3)


def test_separable_caps_alpha():
    with pytest.warns(CalibrationWarning, match="separable"):
        cal = train_linear(labeled_scores([2.0, 3.0], [0.0, 1.0]))
    assert cal.alpha == 1e4
    assert cal(1.5) == pytest.approx(0.0, abs=1e-9)


def test_shuffle_invariance(rng):
    s = _s1(3000, seed=5)
    perm = rng.permutation(len(s))
    a, b = train_linear(s), train_linear(s.take(perm))
    np.testing.assert_allclose(a(s.scores), b(s.scores), atol=1e-6)


def test_needs_both_classes():
    with pytest.raises(ValidationError):
        train_linear(labeled_scores([1.0], []))


def test_train_scale_matches_scalar_minimizer():
    s = _s1(3000, seed=2)
    s = s.with_scores(s.scores + 0.3, "shifted")
    tar, non = s.split()
    ref = minimize_scalar(lambda a: _ref_loss(a * tar, a * non), bounds=(1e-6, 50), method="bounded",
                          options=dict(xatol=1e-10)).x
    assert train_scale(s) == pytest.approx(ref, abs=1e-6)


def test_model_file_round_trip_is_bit_exact():
    cal = train_linear(_s1(1000, seed=9), trained_on="dev")
    back = model_from_fields(parse_fields("\n".join(model_lines(cal))))
    assert (back.alpha, back.beta, back.trained_on) == (cal.alpha, cal.beta, "dev")
    assert model_lines(back) == model_lines(cal)


def test_model_file_errors():
    with pytest.raises(FormatError, match="missing"):
        model_from_fields({"calib.kind": "linear", "calib.alpha": "0x1p+0"})
    with pytest.raises(FormatError, match="bad number"):
        model_from_fields({"calib.kind": "linear", "calib.alpha": "two", "calib.beta": "0x0p+0"})
    with pytest.raises(FormatError, match="unknown model kind"):
        model_from_fields({"calib.kind": "plda"})
    with pytest.raises(FormatError, match="key=value"):
        parse_fields("calib.kind linear")


def test_non_finite_parameters_rejected():
    with pytest.raises(ValidationError):
        LinearCalibration(float("nan"), 0.0)


def test_no_convergence_warning_on_regular_data():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        train_linear(_s1(500, seed=4))


def test_score_set_alignment():
    s = ScoreSet.from_arrays([1.0], [0.0])
    assert len(s) == 2
