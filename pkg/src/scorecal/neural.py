"""Condition-aware neural calibrators.

MagNetO maps each utterance vector to a positive magnitude m(.) and scores a
trial as ``m(e) * m(t) * cos(e, t)``.  SONet feeds the concatenated
(enroll, test) vectors to two networks predicting a per-trial scale and
offset, ``alpha(e, t) * s + beta(e, t)``.  Both optionally take log-durations
as extra inputs, can be regularized with the within-batch standard deviation
of their scale/offset outputs, and may carry a final affine tuning stage.
"""

from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import EmbeddingRecord, EmbeddingSet, ScoreSet, TrialList
from .errors import ValidationError
from .linear import CLLR, LinearCalibration, Objective, objective_and_grad, train_linear, train_scale
from .nn import Adam, Network, Standardizer, hex_array, parse_hex_array
from .scoring import length_normalize

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = (512, 512)
STD_LAMBDA_DEFAULT = 0.1  # suggested weight when the std loss is switched on


@dataclass(frozen=True)
class TrainConfig:
    objective: Objective = CLLR
    use_duration: bool = False
    std_lambda: float = 0.0
    batch_size: int = 512
    epochs: int = 20
    seed: int = 0
    domain_batching: bool = False
    balanced_sampling: bool = True
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    lr: float = 1e-3
    warm_start: bool = True

    def __post_init__(self):
        if self.std_lambda < 0:
            raise ValidationError("std_lambda must be >= 0")
        if self.std_lambda > 0 and not self.domain_batching:
            raise ValidationError("std loss needs domain batching (set domain_batching=True)")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be at least 2")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")


# ---------------------------------------------------------------------------
# std-loss


def std_penalty(scales, offsets=None) -> float:
    """Population std of the scales plus that of the offsets (0 for batches below 2)."""
    return _std_and_grad(scales)[0] + (_std_and_grad(offsets)[0] if offsets is not None else 0.0)


def _std_and_grad(x) -> tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return 0.0, np.zeros_like(x)
    dev = x - x.mean()
    sd = math.sqrt(float(np.mean(dev * dev)))
    if sd == 0.0:
        return 0.0, np.zeros_like(x)
    return sd, dev / (x.size * sd)


# ---------------------------------------------------------------------------
# input features


def log_durations(durations) -> np.ndarray:
    d = np.asarray(durations, dtype=np.float64)
    if np.any(d <= 0):
        raise ValidationError("durations must be positive to take their logarithm")
    return np.log(d)


def utterance_inputs(vectors, durations, use_duration: bool) -> np.ndarray:
    """MagNetO inputs: the vector, optionally followed by its log-duration."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if use_duration:
        return np.column_stack([vectors, log_durations(np.atleast_1d(durations))])
    return vectors


def trial_inputs(ve, vt, de, dt, use_duration: bool) -> np.ndarray:
    """SONet inputs: enroll vector, test vector, then optionally both log-durations."""
    cols = [np.atleast_2d(np.asarray(ve, dtype=np.float64)), np.atleast_2d(np.asarray(vt, dtype=np.float64))]
    if use_duration:
        cols += [log_durations(np.atleast_1d(de))[:, None], log_durations(np.atleast_1d(dt))[:, None]]
    return np.hstack(cols)


def _trial_rows(emb: EmbeddingSet, trials: TrialList) -> tuple[np.ndarray, np.ndarray]:
    return emb.rows(trials.enroll_ids, "enroll id"), emb.rows(trials.test_ids, "test id")


def _softplus_inv(y: float) -> float:
    return y + math.log(-math.expm1(-y))


@dataclass
class _Batch:
    is_target: np.ndarray
    scores: np.ndarray  # raw score (SONet) or cosine (MagNetO)
    x: np.ndarray | None = None  # SONet trial inputs
    xe: np.ndarray | None = None  # MagNetO enroll inputs
    xt: np.ndarray | None = None  # MagNetO test inputs

    def take(self, idx) -> "_Batch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return _Batch(self.is_target[idx], self.scores[idx], pick(self.x), pick(self.xe), pick(self.xt))


class _Calibrator:
    kind = ""

    def __init__(self, use_duration: bool, final_tune: LinearCalibration | None = None,
                 objective: str = "cllr", history=()):
        self.use_duration = use_duration
        self.final_tune = final_tune
        self.objective = objective
        self.history = list(history)

    def nets(self) -> list[Network]:
        raise NotImplementedError

    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets() for p in net.params()]

    def n_params(self) -> int:
        return sum(net.n_params() for net in self.nets())

    def with_tune(self, tune: LinearCalibration | None):
        out = self._clone()
        out.final_tune = tune
        return out

    def _clone(self):
        return copy.deepcopy(self)

    def _tuned(self, l: np.ndarray) -> np.ndarray:
        return self.final_tune(l) if self.final_tune is not None else l

    def _header(self) -> list[str]:
        lines = [
            f"calib.kind={self.kind}",
            f"calib.loss={self.objective}",
            f"calib.use_duration={int(self.use_duration)}",
            f"calib.history={hex_array(self.history)}",
            f"calib.tuned={int(self.final_tune is not None)}",
        ]
        if self.final_tune is not None:
            lines += self.final_tune.to_lines("tune")
        return lines


class MagnetoModel(_Calibrator):
    """Per-utterance magnitude network; trial score ``m(e) m(t) cos(e, t)``."""

    kind = "magneto"

    def __init__(self, net: Network, use_duration: bool = False, **kw):
        super().__init__(use_duration, **kw)
        if net.head != "softplus":
            raise ValidationError("MagNetO magnitude network needs a softplus head")
        self.net = net

    def nets(self):
        return [self.net]

    @property
    def vector_dim(self) -> int:
        return self.net.input_dim - int(self.use_duration)

    def utterance_inputs(self, vectors, durations) -> np.ndarray:
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if vectors.shape[1] != self.vector_dim:
            raise ValidationError(f"dimension mismatch: model expects {self.vector_dim}-dim vectors, "
                                  f"got {vectors.shape[1]}")
        return utterance_inputs(vectors, durations, self.use_duration)

    def _batch(self, emb: EmbeddingSet, trials: TrialList) -> _Batch:
        ei, ti = _trial_rows(emb, trials)
        cos = np.einsum("ij,ij->i", length_normalize(emb.vectors[ei]), length_normalize(emb.vectors[ti]))
        return _Batch(trials.is_target, cos,
                      xe=self.utterance_inputs(emb.vectors[ei], emb.durations[ei]),
                      xt=self.utterance_inputs(emb.vectors[ti], emb.durations[ti]))

    def scales(self, emb: EmbeddingSet, trials: TrialList) -> np.ndarray:
        """Per-trial multiplicative factor m(e) * m(t)."""
        b = self._batch(emb, trials)
        return self.net.predict(b.xe) * self.net.predict(b.xt)

    def score(self, emb: EmbeddingSet, trials: TrialList, raw: ScoreSet | None = None,
              tuned: bool = True) -> ScoreSet:
        b = self._batch(emb, trials)
        l = self.net.predict(b.xe) * self.net.predict(b.xt) * b.scores
        return ScoreSet(trials, self._tuned(l) if tuned else l, "magneto")

    def loss_and_grad(self, b: _Batch, objective: Objective, std_lambda: float):
        me, ce = self.net.forward(b.xe)
        mt, ct = self.net.forward(b.xt)
        scale = me * mt
        loss, dl = objective_and_grad(scale * b.scores, b.is_target, objective)
        dscale = dl * b.scores
        if std_lambda:
            p, dp = _std_and_grad(scale)
            loss += std_lambda * p
            dscale = dscale + std_lambda * dp
        ge = self.net.backward(ce, dscale * mt)
        gt = self.net.backward(ct, dscale * me)
        return loss, [a + c for a, c in zip(ge, gt)]

    def to_lines(self) -> list[str]:
        return self._header() + self.net.to_lines("net")

    @classmethod
    def from_fields(cls, fields, header) -> "MagnetoModel":
        return cls(Network.from_fields(fields, "net"), **header)


class SonetModel(_Calibrator):
    """Scale and offset networks over concatenated (enroll, test) inputs."""

    kind = "sonet"

    def __init__(self, scale_net: Network, offset_net: Network, use_duration: bool = False, **kw):
        super().__init__(use_duration, **kw)
        if scale_net.head != "softplus" or offset_net.head != "linear":
            raise ValidationError("SONet needs a softplus scale head and a linear offset head")
        if scale_net.input_dim != offset_net.input_dim:
            raise ValidationError("scale and offset networks must share their input dimension")
        self.scale_net = scale_net
        self.offset_net = offset_net

    def nets(self):
        return [self.scale_net, self.offset_net]

    @property
    def vector_dim(self) -> int:
        return (self.scale_net.input_dim - 2 * int(self.use_duration)) // 2

    def trial_inputs(self, ve, vt, de=None, dt=None) -> np.ndarray:
        ve = np.atleast_2d(np.asarray(ve, dtype=np.float64))
        vt = np.atleast_2d(np.asarray(vt, dtype=np.float64))
        if ve.shape[1] != self.vector_dim or vt.shape[1] != self.vector_dim:
            raise ValidationError(f"dimension mismatch: model expects {self.vector_dim}-dim vectors, "
                                  f"got {ve.shape[1]} and {vt.shape[1]}")
        return trial_inputs(ve, vt, de, dt, self.use_duration)

    def _inputs(self, emb: EmbeddingSet, trials: TrialList) -> np.ndarray:
        ei, ti = _trial_rows(emb, trials)
        return self.trial_inputs(emb.vectors[ei], emb.vectors[ti], emb.durations[ei], emb.durations[ti])

    def _batch(self, emb: EmbeddingSet, trials: TrialList, raw: ScoreSet) -> _Batch:
        if len(raw) != len(trials):
            raise ValidationError(f"{len(raw)} raw scores for {len(trials)} trials")
        return _Batch(trials.is_target, np.asarray(raw.scores), x=self._inputs(emb, trials))

    def scale_offset(self, emb: EmbeddingSet, trials: TrialList) -> tuple[np.ndarray, np.ndarray]:
        x = self._inputs(emb, trials)
        return self.scale_net.predict(x), self.offset_net.predict(x)

    def score(self, emb: EmbeddingSet, trials: TrialList, raw: ScoreSet | None = None,
              tuned: bool = True) -> ScoreSet:
        if raw is None:
            from .scoring import score_trials
            raw = score_trials(emb, trials)
        a, b = self.scale_offset(emb, trials)
        l = a * raw.scores + b
        return ScoreSet(trials, self._tuned(l) if tuned else l, "sonet")

    def loss_and_grad(self, b: _Batch, objective: Objective, std_lambda: float):
        a, ca = self.scale_net.forward(b.x)
        o, co = self.offset_net.forward(b.x)
        loss, dl = objective_and_grad(a * b.scores + o, b.is_target, objective)
        da = dl * b.scores
        do = dl
        if std_lambda:
            pa, dpa = _std_and_grad(a)
            po, dpo = _std_and_grad(o)
            loss += std_lambda * (pa + po)
            da = da + std_lambda * dpa
            do = do + std_lambda * dpo
        return loss, self.scale_net.backward(ca, da) + self.offset_net.backward(co, do)

    def to_lines(self) -> list[str]:
        return self._header() + self.scale_net.to_lines("net.scale") + self.offset_net.to_lines("net.offset")

    @classmethod
    def from_fields(cls, fields, header) -> "SonetModel":
        return cls(Network.from_fields(fields, "net.scale"), Network.from_fields(fields, "net.offset"), **header)


def parse_header(fields: dict[str, str]) -> dict:
    history = fields.get("calib.history", "")
    tune = LinearCalibration.from_fields(fields, "tune") if fields.get("calib.tuned") == "1" else None
    return dict(
        use_duration=fields.get("calib.use_duration") == "1",
        objective=fields.get("calib.loss", "cllr"),
        history=parse_hex_array(history, (len(history.split(",")) if history else 0,)).tolist(),
        final_tune=tune,
    )


# ---------------------------------------------------------------------------
# record-level scoring


def magneto_score(model: MagnetoModel, e: EmbeddingRecord, t: EmbeddingRecord,
                  base_cosine: float | None = None) -> float:
    if base_cosine is None:
        base_cosine = float(np.dot(length_normalize(e.vector), length_normalize(t.vector)))
    me = model.net.predict(model.utterance_inputs(e.vector, e.duration_s)[0])
    mt = model.net.predict(model.utterance_inputs(t.vector, t.duration_s)[0])
    return float(model._tuned(np.float64(me * mt * base_cosine)))


def sonet_score(model: SonetModel, e: EmbeddingRecord, t: EmbeddingRecord, raw_score: float) -> float:
    x = model.trial_inputs(e.vector, t.vector, e.duration_s, t.duration_s)[0]
    return float(model._tuned(np.float64(model.scale_net.predict(x) * raw_score + model.offset_net.predict(x))))


# ---------------------------------------------------------------------------
# training


class BatchSampler:
    """Deterministic minibatches, optionally class-balanced and single-domain.

    Each (domain, class) pool is walked through a fresh permutation; pools
    are reshuffled when exhausted.  With domain batching, domains take turns
    in sorted order.
    """

    def __init__(self, is_target: np.ndarray, domains, batch_size: int, rng: np.random.Generator,
                 balanced: bool = True, by_domain: bool = False):
        self.rng = rng
        self.batch_size = batch_size
        self.balanced = balanced
        domains = np.asarray(domains if by_domain else [""] * len(is_target), dtype=object)
        self.domains = sorted(set(domains))
        self.pools: dict[tuple, list] = {}
        for dom in self.domains:
            in_dom = domains == dom
            keys = [(True, is_target), (False, ~is_target)] if balanced else [(None, np.ones_like(is_target))]
            for cls, mask in keys:
                idx = np.flatnonzero(in_dom & mask)
                if idx.size == 0:
                    raise ValidationError(f"domain {dom!r} has no {'target' if cls else 'nontarget'} trials "
                                          "for balanced batches")
                self.pools[(dom, cls)] = [idx, rng.permutation(idx), 0]
        self.turn = 0

    def _draw(self, key, k: int) -> np.ndarray:
        pool = self.pools[key]
        k = min(k, pool[0].size)
        out = []
        while k > 0:
            if pool[2] >= pool[1].size:
                pool[1], pool[2] = self.rng.permutation(pool[0]), 0
            take = pool[1][pool[2]:pool[2] + k]
            pool[2] += take.size
            k -= take.size
            out.append(take)
        return np.concatenate(out)

    def next(self) -> np.ndarray:
        dom = self.domains[self.turn % len(self.domains)]
        self.turn += 1
        if not self.balanced:
            return self._draw((dom, None), self.batch_size)
        half = self.batch_size // 2
        return np.concatenate([self._draw((dom, True), half), self._draw((dom, False), self.batch_size - half)])


def init_calibrator(kind: str, emb: EmbeddingSet, trials: TrialList, raw: ScoreSet | None,
                    config: TrainConfig):
    """Build the untrained model: seeded weights, fitted standardizer, warm-started output biases."""
    rng = np.random.default_rng(config.seed)
    ei, ti = _trial_rows(emb, trials)
    if kind == "magneto":
        used = np.unique(np.r_[ei, ti])
        x = utterance_inputs(emb.vectors[used], emb.durations[used], config.use_duration)
        net = Network.init(x.shape[1], config.hidden, "softplus", rng, Standardizer.fit(x))
        model = MagnetoModel(net, config.use_duration, objective=str(config.objective))
        base = np.einsum("ij,ij->i", length_normalize(emb.vectors[ei]), length_normalize(emb.vectors[ti]))
    elif kind == "sonet":
        x = trial_inputs(emb.vectors[ei], emb.vectors[ti], emb.durations[ei], emb.durations[ti],
                         config.use_duration)
        std = Standardizer.fit(x)
        model = SonetModel(Network.init(x.shape[1], config.hidden, "softplus", rng, std),
                           Network.init(x.shape[1], config.hidden, "linear", rng,
                                        Standardizer(std.mean.copy(), std.std.copy())),
                           config.use_duration, objective=str(config.objective))
        base = raw.scores
    else:
        raise ValidationError(f"unknown calibrator kind {kind!r} (expected magneto or sonet)")

    if config.warm_start:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if kind == "magneto":
                # pure scale model: each side starts at the square root of the best global scale
                alpha = train_scale(ScoreSet(trials, base), config.objective)
                model.net.layers[-1].bias[:] = _softplus_inv(math.sqrt(alpha))
                return model
            lin = train_linear(ScoreSet(trials, base), config.objective)
            model.scale_net.layers[-1].bias[:] = _softplus_inv(lin.alpha)
            model.offset_net.layers[-1].bias[:] = lin.beta
    return model


def train_calibrator(kind: str, emb: EmbeddingSet, trials: TrialList, raw: ScoreSet | None = None,
                     config: TrainConfig = TrainConfig()):
    """Train a MagNetO (``kind="magneto"``) or SONet (``kind="sonet"``) calibrator.

    ``raw`` holds the trial scores SONet rescales; MagNetO always works on the
    cosine of the two vectors and ignores it.  Returns the model with
    ``history`` holding the mean minibatch loss of every epoch.
    """
    if trials.n_unlabeled:
        raise ValidationError("training trials must all be labeled")
    if trials.n_target == 0 or trials.n_nontarget == 0:
        raise ValidationError("training needs both target and nontarget trials")
    if kind == "sonet" and raw is None:
        from .scoring import score_trials
        raw = score_trials(emb, trials)
    if config.std_lambda > 0 and any(not d for d in trials.domains):
        raise ValidationError("std loss needs a domain tag on every training trial")

    model = init_calibrator(kind, emb, trials, raw, config)
    if config.epochs == 0:
        return model
    data = model._batch(emb, trials) if kind == "magneto" else model._batch(emb, trials, raw)
    rng = np.random.default_rng([config.seed, 1])
    sampler = BatchSampler(trials.is_target, trials.domains, config.batch_size, rng,
                           config.balanced_sampling, config.domain_batching)
    n_batches = max(1, math.ceil(len(trials) / config.batch_size))
    params = model.params()
    opt = Adam(params, lr=config.lr)
    for epoch in range(config.epochs):
        total = 0.0
        for _ in range(n_batches):
            batch = data.take(sampler.next())
            loss, grads = model.loss_and_grad(batch, config.objective, config.std_lambda)
            opt.step(params, grads)
            total += loss
        model.history.append(total / n_batches)
        log.info("%s epoch %d loss %.6f", kind, epoch + 1, model.history[-1])
    return model


def final_tune(model, emb: EmbeddingSet, dev_trials: TrialList, dev_raw: ScoreSet | None = None,
               objective: Objective | str = CLLR):
    """Fit an affine map on the model's untuned dev-set outputs and attach it."""
    if len(dev_trials) == 0:
        raise ValidationError("final tuning needs a non-empty labeled dev set")
    pre = model.score(emb, dev_trials, dev_raw, tuned=False)
    return model.with_tune(train_linear(pre, objective, trained_on="dev"))
