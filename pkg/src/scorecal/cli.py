"""Command-line entry point: ``scorecal <subcommand> ...``.

Exit codes: 0 on success, 1 on invalid input (bad flags, malformed files,
failed preconditions), 2 when a file cannot be read or written.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from . import synth
from .data import load_embeddings, read_scores, read_trials, save_embeddings, write_scores, write_trials
from .errors import ScorecalError, ValidationError
from .linear import Objective, train_linear
from .metrics import DEFAULT_PRIOR, det_sweep, emit_det, report
from .modelfile import write_model
from .neural import DEFAULT_HIDDEN, STD_LAMBDA_DEFAULT, TrainConfig, final_tune, train_calibrator
from .pipeline import NEURAL, STAGES, Preset, check_preset, load_pipeline
from .scoring import score_trials
from .snorm import DEFAULT_TOP_X, Cohort, snorm, snorm_scores

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ScorecalError):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as one line and exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message} (see --help)")


def _prior(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("prior must be in (0, 1)")
    return v


def _objective(text: str) -> Objective:
    try:
        return Objective.parse(text)
    except ValidationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _hidden(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated layer sizes, got {text!r}") from None
    if any(s < 1 for s in sizes):
        raise argparse.ArgumentTypeError("layer sizes must be positive")
    return sizes


def _stages(text: str) -> tuple[str, ...]:
    stages = tuple(s.strip() for s in text.split(",") if s.strip())
    for s in stages:
        if s not in STAGES:
            raise argparse.ArgumentTypeError(f"unknown stage {s!r} (choose from {', '.join(STAGES)})")
    return stages


# ---------------------------------------------------------------------------
# subcommands


def cmd_score(a) -> None:
    emb = load_embeddings(a.embeddings)
    trials = read_trials(a.trials)
    write_scores(score_trials(emb, trials), a.out)


def cmd_snorm(a) -> None:
    emb = load_embeddings(a.embeddings)
    trials = read_trials(a.trials)
    raw = read_scores(a.scores, trials) if a.scores else score_trials(emb, trials)
    out = snorm(trials, raw, emb, Cohort(load_embeddings(a.cohort), a.top_x))
    write_scores(out, a.out)


def cmd_train_linear(a) -> None:
    trials = read_trials(a.trials)
    scores = read_scores(a.scores, trials)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cal = train_linear(scores, a.objective, max_iter=a.max_iter, trained_on=Path(a.trials).name)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_model(cal, a.out)
    print(f"alpha\t{cal.alpha:.9g}\nbeta\t{cal.beta:.9g}")


def _train_neural(kind: str, a) -> None:
    emb = load_embeddings(a.embeddings)
    trials = read_trials(a.trials)
    raw = read_scores(a.scores, trials) if getattr(a, "scores", None) else None
    lam = a.std_lambda if a.std_loss else 0.0
    config = TrainConfig(objective=a.objective, use_duration=a.use_duration, std_lambda=lam,
                         batch_size=a.batch_size, epochs=a.epochs, seed=a.seed,
                         domain_batching=a.domain_batching or lam > 0,
                         balanced_sampling=not a.unbalanced, hidden=a.hidden, lr=a.lr,
                         warm_start=not a.no_warm_start)
    model = train_calibrator(kind, emb, trials, raw, config)
    if not a.no_final_tune:
        if a.dev_trials:
            dev = read_trials(a.dev_trials)
            dev_raw = read_scores(a.dev_scores, dev) if getattr(a, "dev_scores", None) else None
        else:
            dev, dev_raw = trials, raw
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            model = final_tune(model, emb, dev, dev_raw, a.objective)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    write_model(model, a.out)
    for epoch, loss in enumerate(model.history, 1):
        print(f"epoch\t{epoch}\t{loss:.9g}")


def cmd_train_magneto(a) -> None:
    _train_neural("magneto", a)


def cmd_train_sonet(a) -> None:
    _train_neural("sonet", a)


def cmd_apply(a) -> None:
    if a.preset and a.stages:
        raise UsageError("give either --preset or --stages, not both")
    preset = Preset.parse(a.preset) if a.preset else None
    stages = preset.stages() if preset else (a.stages or ("cosine",))
    if a.scores and stages[0] == "cosine":
        stages = ("scores",) + tuple(stages[1:])
    pipe = load_pipeline(stages, a.neural, a.affine, a.cohort, a.top_x)
    if preset:
        check_preset(preset, pipe)
    trials = read_trials(a.trials)
    emb = load_embeddings(a.embeddings) if a.embeddings else None
    scores = read_scores(a.scores, trials) if a.scores else None
    write_scores(pipe.run(emb, trials, scores), a.out)


def cmd_eval(a) -> None:
    trials = read_trials(a.trials)
    rep = report(read_scores(a.scores, trials), a.prior)
    text = rep.block() if a.format == "block" else "\n".join(rep.lines())
    print(text)
    if a.out:
        Path(a.out).write_text(text + "\n", encoding="utf-8")


def cmd_det(a) -> None:
    trials = read_trials(a.trials)
    emit_det(det_sweep(read_scores(a.scores, trials)), a.out)


def cmd_simulate(a) -> None:
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if a.kind == "scores":
        config = synth.read_score_config(a.config) if a.config else synth.preset(a.preset)
        if a.seed is not None:
            config = synth.ScoreWorldConfig(**{**config.__dict__, "seed": a.seed})
        world = synth.gen_scores(config)
        write_trials(world.trials, out / "trials.tsv")
        write_scores(world.scores, out / "scores.tsv")
        save_embeddings(world.features, out / "features.evec")
        with (out / "oracle.tsv").open("w", encoding="utf-8", newline="\n") as fh:
            fh.write("domain\talpha\tbeta\tcllr\tmin_dcf\n")
            for name, o in world.oracle.items():
                ab = [f"{v:.9g}" if v is not None else "NA" for v in (o.alpha, o.beta)]
                fh.write(f"{name}\t{ab[0]}\t{ab[1]}\t{o.cllr:.9g}\t{o.min_dcf:.9g}\n")
        if a.cohort_size:
            mu_e, sd_e, mu_t, sd_t = synth.simulate_cohort_stats(world, a.cohort_size, a.top_x, seed=0)
            write_scores(world.scores.with_scores(snorm_scores(world.scores.scores, mu_e, sd_e, mu_t, sd_t),
                                                  "snorm"), out / "scores.snorm.tsv")
    else:
        config = synth.read_embedding_config(a.config) if a.config else synth.EmbeddingWorldConfig()
        if a.seed is not None:
            config = synth.EmbeddingWorldConfig(**{**config.__dict__, "seed": a.seed})
        world = synth.gen_embeddings(config)
        save_embeddings(world.embeddings, out / "embeddings.evec")
        save_embeddings(world.cohort(), out / "cohort.evec")
        for name, trials in world.trials.items():
            write_trials(trials, out / f"{name}.trials.tsv")
    print(f"wrote simulation to {out}")


# ---------------------------------------------------------------------------
# parser


def _train_flags(p, kind: str) -> None:
    p.add_argument("--embeddings", required=True, help="embedding file (.evec binary, or .tsv)")
    p.add_argument("--trials", required=True, help="labeled training trial list (TSV)")
    if kind == "sonet":
        p.add_argument("--scores", help="raw training scores to rescale (default: cosine of the embeddings)")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--objective", type=_objective, default=Objective("cllr"),
                   help="training loss: cllr (default) or weighted_bce(PRIOR)")
    p.add_argument("--use-duration", action="store_true", help="append log-durations to the network inputs")
    p.add_argument("--std-loss", action="store_true",
                   help="regularize the std of scale/offset outputs within each batch (implies --domain-batching)")
    p.add_argument("--std-lambda", type=float, default=STD_LAMBDA_DEFAULT,
                   help=f"std loss weight used with --std-loss (default {STD_LAMBDA_DEFAULT})")
    p.add_argument("--domain-batching", action="store_true",
                   help="draw every minibatch from a single domain (trial column 4)")
    p.add_argument("--unbalanced", action="store_true",
                   help="sample minibatches uniformly instead of half target, half nontarget")
    p.add_argument("--batch-size", type=int, default=512, help="minibatch size (default 512)")
    p.add_argument("--epochs", type=int, default=20, help="training epochs (default 20)")
    p.add_argument("--hidden", type=_hidden, default=DEFAULT_HIDDEN,
                   help="comma-separated hidden layer sizes (default 512,512)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 1e-3)")
    p.add_argument("--no-warm-start", action="store_true",
                   help="start output biases at zero instead of a linear-calibration fit")
    p.add_argument("--dev-trials", help="labeled dev trials for the final affine tuning (default: --trials)")
    p.add_argument("--no-final-tune", action="store_true", help="skip the final affine tuning stage")
    if kind == "sonet":
        p.add_argument("--dev-scores", help="raw dev scores for --dev-trials (default: cosine)")
    p.add_argument("--seed", type=int, default=0, help="seed for weight init and batch order (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scorecal", description="Speaker verification score calibration toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("score", help="cosine-score a trial list", description="Cosine-score a trial list.")
    p.add_argument("--embeddings", required=True, help="embedding file (.evec binary, or .tsv)")
    p.add_argument("--trials", required=True, help="trial list (TSV)")
    p.add_argument("--out", required=True, help="score file to write")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("snorm", help="adaptive s-norm of trial scores",
                       description="Adaptive symmetric score normalization with a top-X cohort.")
    p.add_argument("--embeddings", required=True, help="embedding file holding the trial utterances")
    p.add_argument("--trials", required=True, help="trial list (TSV)")
    p.add_argument("--scores", help="raw scores to normalize (default: cosine of the embeddings)")
    p.add_argument("--cohort", required=True, help="cohort embedding file")
    p.add_argument("--top-x", type=int, default=DEFAULT_TOP_X, help=f"cohort scores kept (default {DEFAULT_TOP_X})")
    p.add_argument("--out", required=True, help="score file to write")
    p.set_defaults(func=cmd_snorm)

    p = sub.add_parser("train-linear", help="fit an affine calibration",
                       description="Fit l = alpha * s + beta on labeled scores.")
    p.add_argument("--scores", required=True, help="training scores")
    p.add_argument("--trials", required=True, help="labeled trial list matching --scores")
    p.add_argument("--objective", type=_objective, default=Objective("cllr"),
                   help="training loss: cllr (default) or weighted_bce(PRIOR)")
    p.add_argument("--max-iter", type=int, default=10_000, help="iteration cap (default 10000)")
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=cmd_train_linear)

    p = sub.add_parser("train-magneto", help="train a MagNetO calibrator",
                       description="Train a per-utterance magnitude network scaling cosine scores.")
    _train_flags(p, "magneto")
    p.set_defaults(func=cmd_train_magneto)

    p = sub.add_parser("train-sonet", help="train a SONet calibrator",
                       description="Train scale and offset networks over (enroll, test) inputs.")
    _train_flags(p, "sonet")
    p.set_defaults(func=cmd_train_sonet)

    p = sub.add_parser("apply", help="run a scoring pipeline",
                       description="Run an ordered stage list or a named system preset. Presets: "
                                   "baseline, magneto, sonet, each optionally with +dur (neural only), "
                                   "+snorm and +stdloss (a training-time marker, no effect here).")
    p.add_argument("--trials", required=True, help="trial list (TSV)")
    p.add_argument("--embeddings", help="embedding file (needed by cosine, snorm and neural stages)")
    p.add_argument("--scores", help="external input scores; replaces the cosine stage")
    p.add_argument("--stages", type=_stages,
                   help=f"comma-separated stage list from {', '.join(STAGES)} (default: cosine)")
    p.add_argument("--preset", help="system preset such as baseline+snorm or sonet+dur+snorm")
    p.add_argument("--neural", help=f"model file for the {' or '.join(NEURAL)} stage")
    p.add_argument("--affine", help="linear model file for the affine stage")
    p.add_argument("--cohort", help="cohort embedding file for the snorm stage")
    p.add_argument("--top-x", type=int, default=DEFAULT_TOP_X, help=f"cohort scores kept (default {DEFAULT_TOP_X})")
    p.add_argument("--out", required=True, help="score file to write")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("eval", help="print EER, minDCF, actDCF and Cllr",
                       description="Evaluate labeled scores.")
    p.add_argument("--scores", required=True, help="score file")
    p.add_argument("--trials", required=True, help="labeled trial list matching --scores")
    p.add_argument("--prior", type=_prior, default=DEFAULT_PRIOR,
                   help=f"target prior of the operating point (default {DEFAULT_PRIOR})")
    p.add_argument("--format", choices=("tsv", "block"), default="tsv",
                   help="key<TAB>value lines (default) or a readable block")
    p.add_argument("--out", help="also write the report to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("det", help="write the DET sweep", description="Write threshold, P_miss, P_fa rows.")
    p.add_argument("--scores", required=True, help="score file")
    p.add_argument("--trials", required=True, help="labeled trial list matching --scores")
    p.add_argument("--out", required=True, help="DET TSV file to write")
    p.set_defaults(func=cmd_det)

    p = sub.add_parser("simulate", help="generate synthetic data",
                       description="Generate a synthetic score world (presets S1, S2) or embedding world.")
    p.add_argument("--kind", choices=("scores", "embeddings"), default="scores",
                   help="score-level world with oracle (default) or embedding-level world")
    p.add_argument("--preset", choices=tuple(synth.PRESETS), default="S1",
                   help="score-world preset (default S1)")
    p.add_argument("--config", help="key=value config file (overrides --preset)")
    p.add_argument("--cohort-size", type=int, default=0,
                   help="score worlds: also write s-normed scores using a mixed cohort pool of this size")
    p.add_argument("--top-x", type=int, default=DEFAULT_TOP_X,
                   help=f"cohort scores kept with --cohort-size (default {DEFAULT_TOP_X})")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", required=True, help="directory for the generated files")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        args.func(args)
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return EXIT_IO
    except (ScorecalError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
