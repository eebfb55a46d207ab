"""Detection metrics: DET sweep, EER, minDCF/actDCF and Cllr.

Conventions (pinned):

* a trial is accepted as target when ``score >= threshold``
* DCF uses unit miss/false-alarm costs and is normalized by ``min(pi, 1 - pi)``
* actDCF evaluates the Bayes threshold ``ln((1 - pi) / pi)``, i.e. it treats
  scores as log-likelihood ratios
* EER interpolates linearly between the two sweep points where
  ``p_miss - p_fa`` changes sign (no convex hull)
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .data import ScoreSet
from .errors import FormatError, PolarityWarning, ValidationError
from .linear import cllr  # noqa: F401  (single implementation, re-exported)
from .linear import cllr_arrays

DEFAULT_PRIOR = 0.05


@dataclass(frozen=True)
class DetPoint:
    threshold: float
    p_miss: float
    p_fa: float


@dataclass(frozen=True)
class DetSweep:
    """Operating points at every distinct score plus the two infinite sentinels."""

    thresholds: np.ndarray
    n_miss: np.ndarray
    n_fa: np.ndarray
    n_target: int
    n_nontarget: int

    @property
    def p_miss(self) -> np.ndarray:
        return self.n_miss / self.n_target

    @property
    def p_fa(self) -> np.ndarray:
        return self.n_fa / self.n_nontarget

    def __len__(self) -> int:
        return self.thresholds.size

    def __iter__(self) -> Iterator[DetPoint]:
        pm, pf = self.p_miss, self.p_fa
        for k in range(len(self)):
            yield DetPoint(float(self.thresholds[k]), float(pm[k]), float(pf[k]))


def _classes(scores) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scores, ScoreSet):
        tar, non = scores.split()
    else:
        tar, non = (np.asarray(a, dtype=np.float64) for a in scores)
    if tar.size == 0 or non.size == 0:
        raise ValidationError("need at least one target and one nontarget trial")
    return tar, non


def _counts(tar_sorted, non_sorted, thresholds):
    n_miss = np.searchsorted(tar_sorted, thresholds, side="left")
    n_fa = non_sorted.size - np.searchsorted(non_sorted, thresholds, side="left")
    return n_miss, n_fa


def det_sweep(scores) -> DetSweep:
    """Exact miss/false-alarm counts at each distinct score.

    ``scores`` is a labeled :class:`ScoreSet` or a ``(targets, nontargets)`` pair.
    """
    tar, non = _classes(scores)
    tar_s, non_s = np.sort(tar), np.sort(non)
    thr = np.r_[-np.inf, np.unique(np.r_[tar, non]), np.inf]
    n_miss, n_fa = _counts(tar_s, non_s, thr)
    return DetSweep(thr, n_miss, n_fa, tar.size, non.size)


def _eer_from_sweep(sw: DetSweep) -> float:
    pm, pf = sw.p_miss, sw.p_fa
    d = pm - pf
    k = int(np.argmax(d >= 0))  # d runs from -1 to +1, so a crossing exists
    if d[k] == 0:
        return float(pm[k])
    t = -d[k - 1] / (d[k] - d[k - 1])
    return float(pm[k - 1] + t * (pm[k] - pm[k - 1]))


def eer(scores) -> float:
    value = _eer_from_sweep(det_sweep(scores))
    if value > 0.5:
        warnings.warn(f"EER {value:.3f} > 0.5: scores may have inverted polarity", PolarityWarning, stacklevel=2)
    return value


def bayes_threshold(pi: float) -> float:
    _check_prior(pi)
    return math.log((1.0 - pi) / pi)


def _check_prior(pi: float) -> None:
    if not 0.0 < pi < 1.0:
        raise ValidationError(f"prior must be in (0, 1), got {pi}")


def _normalized_cost(p_miss, p_fa, pi: float):
    return (pi * p_miss + (1.0 - pi) * p_fa) / min(pi, 1.0 - pi)


def dcf(scores, pi: float, threshold: float) -> float:
    _check_prior(pi)
    tar, non = _classes(scores)
    p_miss = np.count_nonzero(tar < threshold) / tar.size
    p_fa = np.count_nonzero(non >= threshold) / non.size
    return float(_normalized_cost(p_miss, p_fa, pi))


def min_dcf(scores, pi: float = DEFAULT_PRIOR) -> float:
    _check_prior(pi)
    sw = det_sweep(scores)
    return float(np.min(_normalized_cost(sw.p_miss, sw.p_fa, pi)))


def act_dcf(scores, pi: float = DEFAULT_PRIOR) -> float:
    return dcf(scores, pi, bayes_threshold(pi))


@dataclass(frozen=True)
class MetricsReport:
    eer: float
    min_dcf: float
    act_dcf: float
    cllr: float
    n_target: int
    n_nontarget: int
    prior: float

    def lines(self) -> list[str]:
        return [f"{k}\t{_fmt(v)}" for k, v in asdict(self).items()]

    def block(self) -> str:
        pct = f"{100 * self.eer:.3f}"
        return "\n".join([
            f"trials     {self.n_target} target / {self.n_nontarget} nontarget",
            f"EER        {pct} %",
            f"minDCF     {self.min_dcf:.4f}   (P_tar = {self.prior:g})",
            f"actDCF     {self.act_dcf:.4f}   (P_tar = {self.prior:g})",
            f"Cllr       {self.cllr:.4f} bits",
        ])


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.9g}"


def report(scores, pi: float = DEFAULT_PRIOR) -> MetricsReport:
    tar, non = _classes(scores)
    sw = det_sweep((tar, non))
    e = _eer_from_sweep(sw)
    if e > 0.5:
        warnings.warn(f"EER {e:.3f} > 0.5: scores may have inverted polarity", PolarityWarning, stacklevel=2)
    return MetricsReport(
        eer=e,
        min_dcf=float(np.min(_normalized_cost(sw.p_miss, sw.p_fa, pi))),
        act_dcf=dcf((tar, non), pi, bayes_threshold(pi)),
        cllr=float(cllr_arrays(tar, non)),
        n_target=int(tar.size),
        n_nontarget=int(non.size),
        prior=pi,
    )


def emit_det(points, path) -> None:
    """Write ``threshold<TAB>p_miss<TAB>p_fa`` rows (9 significant digits)."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for p in points:
            fh.write(f"{p.threshold:.9g}\t{p.p_miss:.9g}\t{p.p_fa:.9g}\n")


def read_det(path) -> list[DetPoint]:
    out = []
    for k, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        cols = line.split("\t")
        if len(cols) != 3:
            raise FormatError(f"DET line {k + 1}: expected 3 columns")
        out.append(DetPoint(*(float(c) for c in cols)))
    return out
