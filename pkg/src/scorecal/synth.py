"""Synthetic verification data with known ground truth.

Two generators:

``gen_scores``
    Gaussian class-conditional scores per acoustic domain, plus a small
    per-utterance "condition feature" vector that carries the domain (the way
    pooling activations carry channel information), log-uniform durations,
    and an oracle record with the exact per-domain LLR.

``gen_embeddings``
    Speaker embeddings on the unit sphere with per-domain distortions, split
    into disjoint-speaker train/dev/eval trial lists and a cohort pool.

Named presets ``S1`` and ``S2`` pin the parameters used by the acceptance
suite.  S1 is one equal-variance domain (targets N(1, 1), nontargets N(-1, 1))
whose exact LLR is 2s.  S2 has cosine-like scores in two domains: domain A has
targets N(0.5, 0.1) and nontargets N(0, 0.1); domain B keeps the targets but
its nontarget mean is shifted by +0.15 and its spread scaled by 1.5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import NONTARGET, TARGET, EmbeddingSet, ScoreSet, TrialList
from .errors import ValidationError
from .snorm import top_stats


@dataclass(frozen=True)
class DomainScores:
    mu_tgt: float
    sigma_tgt: float
    mu_non: float
    sigma_non: float

    def __post_init__(self):
        if self.sigma_tgt <= 0 or self.sigma_non <= 0:
            raise ValidationError("score standard deviations must be positive")

    def llr(self, s):
        """Exact log-likelihood ratio of a score under this domain's two Gaussians."""
        s = np.asarray(s, dtype=np.float64)
        zt = (s - self.mu_tgt) / self.sigma_tgt
        zn = (s - self.mu_non) / self.sigma_non
        return 0.5 * (zn * zn - zt * zt) + math.log(self.sigma_non / self.sigma_tgt)

    def optimal_affine(self) -> tuple[float, float] | None:
        """(alpha*, beta*) when the classes share a variance, else None (the LLR is quadratic)."""
        if self.sigma_tgt != self.sigma_non:
            return None
        v = self.sigma_tgt ** 2
        return (self.mu_tgt - self.mu_non) / v, (self.mu_non ** 2 - self.mu_tgt ** 2) / (2 * v)


@dataclass(frozen=True)
class ScoreWorldConfig:
    domains: dict[str, DomainScores]
    n_per_class: int = 10_000
    seed: int = 7
    feature_dim: int = 8
    feature_sep: float = 3.0
    feature_noise: float = 1.0
    duration_range: tuple[float, float] = (2.0, 60.0)

    def __post_init__(self):
        if not self.domains:
            raise ValidationError("need at least one domain")
        if self.n_per_class < 1:
            raise ValidationError("n_per_class must be positive")
        if self.feature_dim < len(self.domains):
            raise ValidationError("feature_dim must be at least the number of domains")
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise ValidationError("duration range must be positive and ordered")


PRESETS: dict[str, ScoreWorldConfig] = {
    "S1": ScoreWorldConfig({"A": DomainScores(1.0, 1.0, -1.0, 1.0)}, n_per_class=10_000, seed=7),
    "S2": ScoreWorldConfig({
        "A": DomainScores(0.5, 0.1, 0.0, 0.1),
        "B": DomainScores(0.5, 0.1, 0.0 + 0.15, 0.1 * 1.5),
    }, n_per_class=10_000, seed=11),
}


def preset(name: str, **overrides) -> ScoreWorldConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown preset {name!r} (expected one of {', '.join(PRESETS)})") from None
    if not overrides:
        return base
    return ScoreWorldConfig(**{**base.__dict__, **overrides})


@dataclass(frozen=True)
class DomainOracle:
    params: DomainScores
    alpha: float | None
    beta: float | None
    cllr: float  # Monte-Carlo Cllr of the exact LLRs on the generated sample
    min_dcf: float  # Monte-Carlo minDCF at the reference prior


@dataclass
class ScoreWorld:
    config: ScoreWorldConfig
    scores: ScoreSet
    features: EmbeddingSet
    oracle: dict[str, DomainOracle] = field(default_factory=dict)

    @property
    def trials(self) -> TrialList:
        return self.scores.trials

    def domain(self, name: str) -> ScoreSet:
        return self.scores.take(np.asarray(self.trials.domains) == name)

    def oracle_llr(self) -> np.ndarray:
        """Exact LLR of every trial score under its own domain."""
        out = np.empty(len(self.scores))
        doms = np.asarray(self.trials.domains)
        for name, p in self.config.domains.items():
            m = doms == name
            out[m] = p.llr(self.scores.scores[m])
        return out


def _reference_cllr(tar, non) -> float:
    # direct per-trial sums, kept apart from the library implementation
    t = sum(math.log1p(math.exp(-x)) if x > -30 else -x for x in tar) / len(tar)
    n = sum(math.log1p(math.exp(x)) if x < 30 else x for x in non) / len(non)
    return (t + n) / (2 * math.log(2))


def _reference_min_dcf(tar, non, pi: float) -> float:
    # cumulative-count sweep over the label-sorted list
    scores = np.r_[tar, non]
    labels = np.r_[np.ones(len(tar)), np.zeros(len(non))]
    order = np.lexsort((labels, scores))  # ties: nontargets first
    lab = labels[order]
    sc = scores[order]
    miss = np.r_[0, np.cumsum(lab)]  # targets strictly below each cut
    fa = len(non) - np.r_[0, np.cumsum(1 - lab)]
    # only cuts between distinct scores are realizable thresholds
    valid = np.r_[True, sc[1:] != sc[:-1], True]
    cost = (pi * miss / len(tar) + (1 - pi) * fa / len(non)) / min(pi, 1 - pi)
    return float(cost[valid].min())


def _log_uniform(rng, lo, hi, n):
    return np.exp(rng.uniform(math.log(lo), math.log(hi), n))


def gen_scores(config: ScoreWorldConfig, reference_prior: float = 0.05) -> ScoreWorld:
    """Generate a labeled, domain-tagged score world.

    Each trial has its own enroll and test utterance (ids ``<dom>-e<k>`` and
    ``<dom>-t<k>``).  Trials are ordered by domain, targets first.
    """
    rng = np.random.default_rng(config.seed)
    n = config.n_per_class
    enroll, test, labels, doms, values = [], [], [], [], []
    oracle = {}
    for name, p in config.domains.items():
        tar = rng.normal(p.mu_tgt, p.sigma_tgt, n)
        non = rng.normal(p.mu_non, p.sigma_non, n)
        base = len(enroll)
        enroll += [f"{name}-e{base + k}" for k in range(2 * n)]
        test += [f"{name}-t{base + k}" for k in range(2 * n)]
        labels += [TARGET] * n + [NONTARGET] * n
        doms += [name] * (2 * n)
        values.append(np.r_[tar, non])
        affine = p.optimal_affine()
        oracle[name] = DomainOracle(
            p, *(affine or (None, None)),
            cllr=_reference_cllr(p.llr(tar), p.llr(non)),
            min_dcf=_reference_min_dcf(p.llr(tar), p.llr(non), reference_prior),
        )
    trials = TrialList(enroll, test, labels, doms)
    scores = ScoreSet(trials, np.concatenate(values), "synthetic")

    # condition features: domain centre along its own axis plus isotropic noise
    names = list(config.domains)
    utt_dom = np.array([names.index(d) for d in doms] * 2)
    centres = np.zeros((len(names), config.feature_dim))
    centres[np.arange(len(names)), np.arange(len(names))] = config.feature_sep
    feats = centres[utt_dom] + config.feature_noise * rng.standard_normal((utt_dom.size, config.feature_dim))
    durs = _log_uniform(rng, *config.duration_range, utt_dom.size)
    features = EmbeddingSet(enroll + test, feats, durs, doms + doms)
    return ScoreWorld(config, scores, features, oracle)


def cohort_pool_domains(config: ScoreWorldConfig, size: int) -> list[str]:
    """Domain labels of a held-out cohort pool mixing all domains evenly."""
    names = list(config.domains)
    return [names[k % len(names)] for k in range(size)]


def gen_cohort_scores(config: ScoreWorldConfig, utt_domains, cohort_domains, rng) -> np.ndarray:
    """Cohort scores for utterances (rows) against a cohort pool (columns).

    Cohort speakers never match, so every entry is a nontarget score.  A pair
    inside one domain follows that domain's nontarget Gaussian; a cross-domain
    pair uses the average of the two domains' mean and spread.
    """
    names = list(config.domains)
    mu = np.array([config.domains[d].mu_non for d in names])
    sd = np.array([config.domains[d].sigma_non for d in names])
    u = np.array([names.index(d) for d in utt_domains])
    c = np.array([names.index(d) for d in cohort_domains])
    pair_mu = 0.5 * (mu[u][:, None] + mu[c][None, :])
    pair_sd = 0.5 * (sd[u][:, None] + sd[c][None, :])
    return pair_mu + pair_sd * rng.standard_normal(pair_mu.shape)


def simulate_cohort_stats(world: ScoreWorld, pool_size: int = 1000, top_x: int = 200, seed: int = 0,
                          chunk: int = 4096):
    """Top-``top_x`` cohort statistics for every trial's enroll and test side.

    Returns ``(mu_e, sigma_e, mu_t, sigma_t)`` aligned with the trial list.
    """
    rng = np.random.default_rng([world.config.seed, seed, 2])
    pool = cohort_pool_domains(world.config, pool_size)
    doms = list(world.trials.domains)
    utts = doms + doms  # enroll side then test side
    mu = np.empty(len(utts))
    sd = np.empty(len(utts))
    for start in range(0, len(utts), chunk):
        block = gen_cohort_scores(world.config, utts[start:start + chunk], pool, rng)
        mu[start:start + chunk], sd[start:start + chunk] = top_stats(block, top_x)
    n = len(doms)
    return mu[:n], sd[:n], mu[n:], sd[n:]


# ---------------------------------------------------------------------------
# embedding-level world


@dataclass(frozen=True)
class DomainDistortion:
    diag_spread: float = 0.0  # log-std of the per-dimension gains
    offset: float = 0.0  # length of a shared per-domain channel vector
    noise: float = 0.05  # isotropic additive noise (relative to unit speaker norm)


@dataclass(frozen=True)
class EmbeddingWorldConfig:
    dim: int = 32
    n_speakers: int = 200
    utts_per_speaker: int = 6
    spread: float = 0.8
    domains: dict[str, DomainDistortion] = field(default_factory=lambda: {
        "A": DomainDistortion(),
        "B": DomainDistortion(diag_spread=0.5, offset=0.5, noise=0.3),
    })
    duration_range: tuple[float, float] = (2.0, 60.0)
    split_fractions: tuple[float, float, float, float] = (0.5, 0.15, 0.2, 0.15)  # train/dev/eval/cohort
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValidationError("dim must be at least 2")
        if self.spread <= 0:
            raise ValidationError("spread must be positive")
        if self.utts_per_speaker < 2:
            raise ValidationError("need at least 2 utterances per speaker for target trials")
        if not self.domains or any(d.noise <= 0 for d in self.domains.values()):
            raise ValidationError("need at least one domain, each with positive noise")
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise ValidationError("duration range must be positive and ordered")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ValidationError("split fractions must be non-negative and sum to 1")


SPLITS = ("train", "dev", "eval")


@dataclass
class EmbeddingWorld:
    config: EmbeddingWorldConfig
    embeddings: EmbeddingSet
    trials: dict[str, TrialList]
    cohort_ids: tuple[str, ...]
    speakers: dict[str, tuple[int, ...]]

    def cohort(self) -> EmbeddingSet:
        return self.embeddings.subset(self.cohort_ids)

    def speaker_of(self, uid: str) -> int:
        return int(uid.split("-")[0][3:])


def _trial_domain(de: str, dt: str) -> str:
    return de if de == dt else f"{de}>{dt}"


def gen_embeddings(config: EmbeddingWorldConfig) -> EmbeddingWorld:
    rng = np.random.default_rng(config.seed)
    d = config.dim
    names = list(config.domains)
    means = rng.standard_normal((config.n_speakers, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    gains = {n: np.exp(config.domains[n].diag_spread * rng.standard_normal(d)) for n in names}
    chans = {}
    for n in names:
        v = rng.standard_normal(d)
        chans[n] = config.domains[n].offset * v / np.linalg.norm(v)

    ids, vecs, doms = [], [], []
    for spk in range(config.n_speakers):
        for k in range(config.utts_per_speaker):
            dom = names[k % len(names)]
            dist = config.domains[dom]
            x = means[spk] + config.spread * rng.standard_normal(d) / math.sqrt(d)
            x = gains[dom] * x + chans[dom] + dist.noise * rng.standard_normal(d) / math.sqrt(d)
            ids.append(f"spk{spk}-u{k}")
            vecs.append(x)
            doms.append(dom)
    durs = _log_uniform(rng, *config.duration_range, len(ids))
    emb = EmbeddingSet(ids, np.array(vecs), durs, doms)

    order = rng.permutation(config.n_speakers)
    bounds = np.round(np.cumsum((0,) + config.split_fractions) * config.n_speakers).astype(int)
    groups = {name: tuple(sorted(order[bounds[i]:bounds[i + 1]].tolist()))
              for i, name in enumerate((*SPLITS, "cohort"))}

    upc = config.utts_per_speaker
    trials = {}
    for name in SPLITS:
        spks = groups[name]
        enroll, test, labels = [], [], []
        for s in spks:
            for i in range(upc):
                for j in range(i + 1, upc):
                    enroll.append(f"spk{s}-u{i}")
                    test.append(f"spk{s}-u{j}")
        n_tgt = len(enroll)
        labels += [TARGET] * n_tgt
        seen = set(zip(enroll, test))
        if len(spks) >= 2:
            while len(enroll) < 2 * n_tgt:
                a, b = rng.choice(spks, 2, replace=False)
                pair = (f"spk{a}-u{rng.integers(upc)}", f"spk{b}-u{rng.integers(upc)}")
                if pair not in seen:
                    seen.add(pair)
                    enroll.append(pair[0])
                    test.append(pair[1])
                    labels.append(NONTARGET)
        tags = [_trial_domain(emb.domains[emb.index[e]], emb.domains[emb.index[t]]) for e, t in zip(enroll, test)]
        trials[name] = TrialList(enroll, test, labels, tags)
    cohort_ids = tuple(f"spk{s}-u{k}" for s in groups["cohort"] for k in range(upc))
    return EmbeddingWorld(config, emb, trials, cohort_ids, groups)


# ---------------------------------------------------------------------------
# key=value config files


def _parse_kv(path) -> dict[str, str]:
    out = {}
    for k, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"config line {k + 1}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def read_score_config(path) -> ScoreWorldConfig:
    """Score-world config file.

    Keys: ``seed``, ``n_per_class``, ``feature_dim``, ``feature_sep``,
    ``feature_noise``, ``duration_min``, ``duration_max`` and, per domain,
    ``domain.<name>=mu_tgt,sigma_tgt,mu_non,sigma_non``.
    """
    kv = _parse_kv(path)
    domains = {}
    for key, value in kv.items():
        if key.startswith("domain."):
            try:
                domains[key[7:]] = DomainScores(*(float(v) for v in value.split(",")))
            except (TypeError, ValueError):
                raise ValidationError(f"{key}: expected mu_tgt,sigma_tgt,mu_non,sigma_non") from None
    base = preset(kv["preset"]) if "preset" in kv else ScoreWorldConfig({"A": DomainScores(1, 1, -1, 1)})
    try:
        return ScoreWorldConfig(
            domains=domains or base.domains,
            n_per_class=int(kv.get("n_per_class", base.n_per_class)),
            seed=int(kv.get("seed", base.seed)),
            feature_dim=int(kv.get("feature_dim", base.feature_dim)),
            feature_sep=float(kv.get("feature_sep", base.feature_sep)),
            feature_noise=float(kv.get("feature_noise", base.feature_noise)),
            duration_range=(float(kv.get("duration_min", base.duration_range[0])),
                            float(kv.get("duration_max", base.duration_range[1]))),
        )
    except ValueError as exc:
        raise ValidationError(f"bad config value: {exc}") from None


def read_embedding_config(path) -> EmbeddingWorldConfig:
    """Embedding-world config file.

    Keys: ``seed``, ``dim``, ``n_speakers``, ``utts_per_speaker``, ``spread``,
    ``duration_min``, ``duration_max``, ``split=train,dev,eval,cohort`` and, per
    domain, ``domain.<name>=diag_spread,offset,noise``.
    """
    kv = _parse_kv(path)
    base = EmbeddingWorldConfig()
    domains = {}
    for key, value in kv.items():
        if key.startswith("domain."):
            try:
                domains[key[7:]] = DomainDistortion(*(float(v) for v in value.split(",")))
            except (TypeError, ValueError):
                raise ValidationError(f"{key}: expected diag_spread,offset,noise") from None
    try:
        split = tuple(float(v) for v in kv["split"].split(",")) if "split" in kv else base.split_fractions
        if len(split) != 4:
            raise ValidationError("split: expected four fractions train,dev,eval,cohort")
        return EmbeddingWorldConfig(
            dim=int(kv.get("dim", base.dim)),
            n_speakers=int(kv.get("n_speakers", base.n_speakers)),
            utts_per_speaker=int(kv.get("utts_per_speaker", base.utts_per_speaker)),
            spread=float(kv.get("spread", base.spread)),
            domains=domains or base.domains,
            duration_range=(float(kv.get("duration_min", base.duration_range[0])),
                            float(kv.get("duration_max", base.duration_range[1]))),
            split_fractions=split,
            seed=int(kv.get("seed", base.seed)),
        )
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad config value: {exc}") from None
