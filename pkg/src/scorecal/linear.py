"""Affine score calibration trained with Cllr or prior-weighted cross-entropy.

Calibrated scores are ``l = alpha * s + beta``.  Training minimizes either

* Cllr (bits): ``1/(2 ln 2) * [mean_T softplus(-l) + mean_N softplus(l)]``
* weighted BCE at prior ``pi``: ``pi * mean_T softplus(-p) + (1 - pi) * mean_N softplus(p)``
  with ``p = l + log(pi / (1 - pi))``

by projected gradient descent with a backtracking line search over
``(log alpha, beta)``; the log parameterization keeps alpha positive.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass

import numpy as np

from .data import ScoreSet
from .errors import CalibrationWarning, ConvergenceWarning, FormatError, ValidationError

ALPHA_MAX = 1e4
_LN2 = math.log(2.0)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


@dataclass(frozen=True)
class Objective:
    """Training objective: ``kind`` is ``"cllr"`` or ``"weighted_bce"``."""

    kind: str = "cllr"
    prior: float | None = None

    def __post_init__(self):
        if self.kind == "cllr":
            if self.prior is not None:
                raise ValidationError("cllr takes no prior")
        elif self.kind == "weighted_bce":
            if self.prior is None or not 0.0 < self.prior < 1.0:
                raise ValidationError(f"weighted_bce needs a prior in (0, 1), got {self.prior}")
        else:
            raise ValidationError(f"unknown loss {self.kind!r} (expected cllr or weighted_bce)")

    def __str__(self) -> str:
        return "cllr" if self.kind == "cllr" else f"weighted_bce({self.prior!r})"

    @classmethod
    def parse(cls, text: str) -> "Objective":
        text = text.strip()
        if text == "cllr":
            return cls("cllr")
        m = re.fullmatch(r"weighted_bce\(([^)]*)\)", text)
        if m:
            try:
                return cls("weighted_bce", float(m.group(1)))
            except ValueError:
                raise ValidationError(f"bad prior in objective {text!r}") from None
        raise ValidationError(f"unknown loss {text!r} (expected cllr or weighted_bce(<pi>))")

    def weights(self, n_target: int, n_nontarget: int) -> tuple[float, float, float]:
        """(target weight per trial, nontarget weight per trial, logit offset)."""
        if self.kind == "cllr":
            c = 1.0 / (2.0 * _LN2)
            return c / n_target, c / n_nontarget, 0.0
        pi = self.prior
        return pi / n_target, (1.0 - pi) / n_nontarget, math.log(pi / (1.0 - pi))


CLLR = Objective("cllr")


def objective_and_grad(llr: np.ndarray, is_target: np.ndarray, objective: Objective = CLLR):
    """Loss value and d loss / d llr for per-trial calibrated scores."""
    n_t = int(np.count_nonzero(is_target))
    n_n = is_target.size - n_t
    if n_t == 0 or n_n == 0:
        raise ValidationError("need at least one target and one nontarget trial")
    w_t, w_n, off = objective.weights(n_t, n_n)
    p = llr + off
    sign = np.where(is_target, -1.0, 1.0)
    w = np.where(is_target, w_t, w_n)
    loss = float(np.sum(w * softplus(sign * p)))
    grad = w * sign * sigmoid(sign * p)
    return loss, grad


def _check_classes(tar: np.ndarray, non: np.ndarray) -> None:
    if tar.size == 0 or non.size == 0:
        raise ValidationError("need at least one target and one nontarget trial")


def cllr_arrays(tar, non) -> float:
    tar = np.asarray(tar, dtype=np.float64)
    non = np.asarray(non, dtype=np.float64)
    _check_classes(tar, non)
    return (np.mean(softplus(-tar)) + np.mean(softplus(non))) / (2.0 * _LN2)


def weighted_bce_arrays(tar, non, pi: float) -> float:
    tar = np.asarray(tar, dtype=np.float64)
    non = np.asarray(non, dtype=np.float64)
    _check_classes(tar, non)
    if not 0.0 < pi < 1.0:
        raise ValidationError(f"prior must be in (0, 1), got {pi}")
    off = math.log(pi / (1.0 - pi))
    return pi * np.mean(softplus(-(tar + off))) + (1.0 - pi) * np.mean(softplus(non + off))


def cllr(scores: ScoreSet) -> float:
    """Cost of the log-likelihood ratio, in bits."""
    return float(cllr_arrays(*scores.split()))


def weighted_bce(scores: ScoreSet, pi: float) -> float:
    """Prior-weighted binary cross-entropy (natural log) at operating point ``pi``."""
    return float(weighted_bce_arrays(*scores.split(), pi))


@dataclass(frozen=True)
class LinearCalibration:
    alpha: float
    beta: float
    trained_on: str = ""
    loss: str = "cllr"
    iterations: int = 0
    grad_norm: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValidationError("alpha and beta must be finite")

    def __call__(self, s):
        return self.alpha * np.asarray(s, dtype=np.float64) + self.beta

    def to_lines(self, prefix: str = "calib") -> list[str]:
        return [
            f"{prefix}.alpha={float(self.alpha).hex()}",
            f"{prefix}.beta={float(self.beta).hex()}",
            f"{prefix}.loss={self.loss}",
            f"{prefix}.trained_on={self.trained_on}",
        ]

    @classmethod
    def from_fields(cls, fields: dict[str, str], prefix: str = "calib") -> "LinearCalibration":
        try:
            return cls(
                alpha=float.fromhex(fields[f"{prefix}.alpha"]),
                beta=float.fromhex(fields[f"{prefix}.beta"]),
                loss=fields.get(f"{prefix}.loss", "cllr"),
                trained_on=fields.get(f"{prefix}.trained_on", ""),
            )
        except KeyError as exc:
            raise FormatError(f"model file missing key {exc.args[0]}") from None
        except ValueError as exc:
            raise FormatError(f"bad number in model file: {exc}") from None


def apply_affine(scores: ScoreSet, cal: LinearCalibration) -> ScoreSet:
    return scores.with_scores(cal(scores.scores), "affine")


def train_linear(scores: ScoreSet, objective: Objective | str = CLLR, *, max_iter: int = 10_000,
                 tol: float = 1e-9, alpha_max: float = ALPHA_MAX, trained_on: str = "") -> LinearCalibration:
    """Fit (alpha, beta) on a labeled score set.

    Starts from alpha=1, beta=0 (or, for separable data, from alpha at the
    cap with the threshold mid-gap) and stops when the projected gradient norm is
    at most ``tol`` or after ``max_iter`` iterations.  The best point seen is
    returned; a :class:`ConvergenceWarning` reports a missed tolerance and a
    :class:`CalibrationWarning` reports alpha pinned at ``alpha_max``.
    """
    if isinstance(objective, str):
        objective = Objective.parse(objective)
    tar, non = scores.split()
    _check_classes(tar, non)
    s = np.r_[tar, non]
    is_t = np.r_[np.ones(tar.size, bool), np.zeros(non.size, bool)]
    # optimize l = exp(u) * z + v on standardized scores z; exact reparameterization
    # of (alpha, beta) that keeps the problem well conditioned for any score scale
    center = float(np.mean(s))
    spread = float(np.std(s)) or 1.0
    z = (s - center) / spread
    a_max = math.log(alpha_max * spread)

    def fg(theta):
        scale = math.exp(theta[0])
        loss, dl = objective_and_grad(scale * z + theta[1], is_t, objective)
        return loss, np.array([scale * np.sum(dl * z), np.sum(dl)])

    def proj_grad(theta, g):
        g = g.copy()
        if theta[0] >= a_max and g[0] < 0:
            g[0] = 0.0
        return g

    theta = np.array([math.log(spread), center])  # alpha=1, beta=0
    separable = tar.min() > non.max()
    if separable:
        # no finite minimizer: pin alpha at the cap, threshold mid-gap
        z_mid = 0.5 * ((tar.min() - center) + (non.max() - center)) / spread
        theta = np.array([a_max, -math.exp(a_max) * z_mid])
    f, g = fg(theta)
    best = (f, theta.copy())
    step = 1.0
    it = 0
    gnorm = float(np.linalg.norm(proj_grad(theta, g)))
    while gnorm > tol and it < max_iter:
        it += 1
        accepted = False
        while step > 1e-20:
            cand = theta - step * g
            cand[0] = min(cand[0], a_max)
            f_new, g_new = fg(cand)
            move = cand - theta
            # Armijo, or (convexity) the candidate has not passed the line minimum
            if f_new <= f + 1e-4 * float(np.dot(g, move)) or float(np.dot(g_new, move)) <= 0.0:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        theta, f, g = cand, f_new, g_new
        if f < best[0]:
            best = (f, theta.copy())
        gnorm = float(np.linalg.norm(proj_grad(theta, g)))
        step *= 2.0

    f_best, theta = best
    if gnorm > tol:
        warnings.warn(f"linear calibration stopped after {it} iterations with gradient norm {gnorm:.3g}",
                      ConvergenceWarning, stacklevel=2)
    alpha = min(math.exp(theta[0]) / spread, alpha_max)
    beta = float(theta[1]) - alpha * center
    if theta[0] >= a_max - 1e-12:
        warnings.warn(f"alpha reached its cap {alpha_max:g}; training scores look separable",
                      CalibrationWarning, stacklevel=2)
    return LinearCalibration(alpha, beta, trained_on, str(objective), it, gnorm)


def train_scale(scores: ScoreSet, objective: Objective | str = CLLR, *, max_iter: int = 100,
                tol: float = 1e-10, alpha_min: float = 1e-6, alpha_max: float = ALPHA_MAX) -> float:
    """Best pure scale alpha for ``l = alpha * s`` (no offset), by safeguarded Newton steps."""
    if isinstance(objective, str):
        objective = Objective.parse(objective)
    tar, non = scores.split()
    _check_classes(tar, non)
    s = np.r_[tar, non]
    is_t = np.r_[np.ones(tar.size, bool), np.zeros(non.size, bool)]
    w_t, w_n, off = objective.weights(tar.size, non.size)
    w = np.where(is_t, w_t, w_n)
    alpha = 1.0
    f, dl = objective_and_grad(alpha * s, is_t, objective)
    for _ in range(max_iter):
        g = float(np.sum(dl * s))
        q = sigmoid(alpha * s + off)
        h = float(np.sum(w * q * (1.0 - q) * s * s))
        step = g / h if h > 0 else math.copysign(1.0, g)
        while True:
            cand = min(max(alpha - step, alpha_min), alpha_max)
            f_new, dl_new = objective_and_grad(cand * s, is_t, objective)
            if f_new <= f or abs(step) < 1e-14:
                break
            step *= 0.5
        done = abs(cand - alpha) <= tol * max(1.0, alpha)
        alpha, f, dl = cand, f_new, dl_new
        if done:
            break
    return alpha
