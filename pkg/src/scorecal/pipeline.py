"""Ordered scoring pipelines: cosine -> (snorm) -> (neural) -> (snorm) -> (affine).

A pipeline is an explicit stage list.  The first stage is ``cosine`` (score
the embeddings) or ``scores`` (an external score file).  At most one neural
stage may appear.  When a neural model carries its own final tuning it is
used only if no ``affine`` stage follows; otherwise the affine stage owns the
last calibration step.

S-norm placed after a neural stage normalizes in the calibrated space: the
cohort is scored through the same model (MagNetO magnitudes, or SONet
scale/offset with the cohort utterance on the opposite side).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import EmbeddingSet, ScoreSet, TrialList, load_embeddings
from .errors import ValidationError
from .linear import LinearCalibration, apply_affine
from .metrics import DEFAULT_PRIOR
from .neural import MagnetoModel, SonetModel
from .scoring import length_normalize, score_trials
from .snorm import DEFAULT_TOP_X, Cohort, StatsCache, snorm

STAGES = ("cosine", "scores", "snorm", "magneto", "sonet", "affine")
NEURAL = ("magneto", "sonet")

PRESET_BASES = ("baseline", "magneto", "sonet")
PRESET_FLAGS = ("dur", "snorm", "stdloss")


@dataclass(frozen=True)
class Preset:
    base: str
    duration: bool = False
    snorm: bool = False
    stdloss: bool = False

    @classmethod
    def parse(cls, name: str) -> "Preset":
        base, *flags = name.split("+")
        if base not in PRESET_BASES:
            raise ValidationError(f"unknown preset {name!r}: base must be one of {', '.join(PRESET_BASES)}")
        bad = [f for f in flags if f not in PRESET_FLAGS]
        if bad or len(set(flags)) != len(flags):
            raise ValidationError(f"unknown preset {name!r}: modifiers are +dur, +snorm, +stdloss")
        if base == "baseline" and ("dur" in flags or "stdloss" in flags):
            raise ValidationError(f"preset {name!r}: +dur and +stdloss apply to neural systems only")
        return cls(base, "dur" in flags, "snorm" in flags, "stdloss" in flags)

    def stages(self) -> tuple[str, ...]:
        """Baseline normalizes before the affine map; neural rows normalize after the network."""
        if self.base == "baseline":
            return ("cosine", "snorm", "affine") if self.snorm else ("cosine", "affine")
        if self.snorm:
            return ("cosine", self.base, "snorm", "affine")
        return ("cosine", self.base)


def validate_stages(stages) -> tuple[str, ...]:
    stages = tuple(stages)
    if not stages or stages[0] not in ("cosine", "scores"):
        raise ValidationError("a pipeline starts with 'cosine' or 'scores'")
    for s in stages:
        if s not in STAGES:
            raise ValidationError(f"unknown stage {s!r} (expected one of {', '.join(STAGES)})")
    if any(s in ("cosine", "scores") for s in stages[1:]):
        raise ValidationError("'cosine'/'scores' may only be the first stage")
    if sum(s in NEURAL for s in stages) > 1:
        raise ValidationError("at most one neural stage per pipeline")
    if len(set(stages)) != len(stages):
        raise ValidationError("each stage may appear only once")
    if "magneto" in stages and stages[stages.index("magneto") - 1] != "cosine":
        raise ValidationError("'magneto' rescales cosine scores and must directly follow 'cosine'")
    return stages


@dataclass
class Pipeline:
    stages: tuple[str, ...]
    neural: MagnetoModel | SonetModel | None = None
    affine: LinearCalibration | None = None
    cohort: EmbeddingSet | None = None
    top_x: int = DEFAULT_TOP_X
    prior: float = DEFAULT_PRIOR
    outputs: list[ScoreSet] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.stages = validate_stages(self.stages)
        for s in self.stages:
            if s in NEURAL:
                want = MagnetoModel if s == "magneto" else SonetModel
                if not isinstance(self.neural, want):
                    got = type(self.neural).__name__ if self.neural is not None else "none"
                    raise ValidationError(f"stage {s!r} needs a {s} model, got {got}")
        if "affine" in self.stages and self.affine is None:
            raise ValidationError("stage 'affine' needs a linear model (--affine)")
        if "snorm" in self.stages and self.cohort is None:
            raise ValidationError("stage 'snorm' needs a cohort (--cohort)")

    def _side_scorer(self, emb: EmbeddingSet, stage_before: str):
        """Cohort scores in the space produced by the stage preceding s-norm."""
        cohort = self.cohort
        cu = length_normalize(cohort.vectors)
        if stage_before == "magneto":
            m = self.neural
            mc = m.net.predict(m.utterance_inputs(cohort.vectors, cohort.durations))

            def scorer(side, rows):
                mu = m.net.predict(m.utterance_inputs(emb.vectors[rows], emb.durations[rows]))
                return np.outer(mu, mc) * (length_normalize(emb.vectors[rows]) @ cu.T)
            return scorer
        if stage_before == "sonet":
            m = self.neural
            nc = len(cohort)

            def scorer(side, rows):
                out = np.empty((len(rows), nc))
                for k, r in enumerate(rows):
                    u = np.broadcast_to(emb.vectors[r], cohort.vectors.shape)
                    du = np.full(nc, emb.durations[r])
                    if side == "enroll":
                        x = m.trial_inputs(u, cohort.vectors, du, cohort.durations)
                    else:
                        x = m.trial_inputs(cohort.vectors, u, cohort.durations, du)
                    raw = cu @ length_normalize(emb.vectors[r])
                    out[k] = m.scale_net.predict(x) * raw + m.offset_net.predict(x)
                return out
            return scorer
        return None

    def run(self, emb: EmbeddingSet | None, trials: TrialList, scores: ScoreSet | None = None) -> ScoreSet:
        """Run every stage; intermediate outputs are kept in ``outputs``."""
        self.outputs = []
        needs_emb = self.stages[0] == "cosine" or any(s in NEURAL or s == "snorm" for s in self.stages)
        if needs_emb and emb is None:
            raise ValidationError("this pipeline needs embeddings")
        current = None
        for k, stage in enumerate(self.stages):
            if stage == "cosine":
                current = score_trials(emb, trials)
            elif stage == "scores":
                if scores is None:
                    raise ValidationError("stage 'scores' needs an input score file (--scores)")
                if len(scores) != len(trials):
                    raise ValidationError(f"{len(scores)} scores for {len(trials)} trials")
                current = scores
            elif stage == "snorm":
                prev = self.stages[k - 1]
                cache = StatsCache(emb, Cohort(self.cohort, self.top_x), self._side_scorer(emb, prev),
                                   chunk=max(1, 200_000 // len(self.cohort)))
                current = snorm(trials, current, emb, Cohort(self.cohort, self.top_x), cache)
            elif stage in NEURAL:
                tuned = "affine" not in self.stages[k + 1:]
                current = self.neural.score(emb, trials, current if stage == "sonet" else None, tuned=tuned)
            elif stage == "affine":
                current = apply_affine(current, self.affine)
            self.outputs.append(current)
        return current


def load_pipeline(stages, neural_path=None, affine_path=None, cohort_path=None, top_x=DEFAULT_TOP_X,
                  prior=DEFAULT_PRIOR) -> Pipeline:
    """Build a pipeline from artifact paths (model files and a cohort embedding file)."""
    from .modelfile import read_model

    neural = read_model(neural_path) if neural_path else None
    if neural is not None and not isinstance(neural, (MagnetoModel, SonetModel)):
        raise ValidationError(f"{neural_path}: expected a magneto or sonet model, got a linear one")
    affine = read_model(affine_path) if affine_path else None
    if affine is not None and not isinstance(affine, LinearCalibration):
        raise ValidationError(f"{affine_path}: expected a linear model for the affine stage")
    cohort = load_embeddings(cohort_path) if cohort_path else None
    return Pipeline(tuple(stages), neural, affine, cohort, top_x, prior)


def check_preset(preset: Preset, pipeline: Pipeline) -> None:
    """Reject model files that do not match the preset's duration setting."""
    if preset.base in NEURAL and pipeline.neural is not None:
        if pipeline.neural.use_duration != preset.duration:
            need = "with" if preset.duration else "without"
            raise ValidationError(f"preset needs a {preset.base} model trained {need} duration inputs "
                                  f"(--use-duration at train time)")
