"""``rfgml`` command line.

Exit codes: 0 success, 1 usage error, 2 data/contract error, 3 numerical failure.
Failures print one ``error: code=<n> kind=<kind> message=<text>`` line on stderr.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import datagen, evaluation, frontend
from .augment import CutMixConfig
from .distribution import ScoreDistribution, confidence_interval, sample
from .model import (
    FULL_REFERENCE,
    INIT_MODES,
    REFERENCE_FREE,
    CheckpointError,
    ListenerNet,
    ModelConfig,
    build_model,
    load_checkpoint,
    predict_file,
)
from .training import (
    FeatureStore,
    ManifestError,
    TrainConfig,
    TrainingDivergedError,
    read_manifest,
    score_manifest,
    train,
)

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _load_model(path) -> ListenerNet:
    return ListenerNet.load(path)


# --------------------------------------------------------------------------- subcommands


def cmd_synth(args) -> None:
    out = args.out or os.environ.get("RFGML_DATA_DIR")
    if not out:
        raise CliError(EXIT_USAGE, "usage", "--out is required when RFGML_DATA_DIR is unset")
    ladder = [s for s in datagen.DEFAULT_LADDER if s.level in set(args.levels)]
    lm = datagen.ListenerModel(n_listeners=args.listeners)
    path = datagen.generate_corpus(out, n_excerpts=args.excerpts, ladder=ladder, listener_model=lm,
                                   seed=args.seed, excerpt_prefix=args.prefix)
    _emit(str(path))


def cmd_featurize(args) -> None:
    cfg = frontend.FrontendConfig(bands=args.bands)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run(path):
        spec = frontend.gammatone_spectrogram(frontend.load_wav(path).as_stereo(), cfg)
        dest = out_dir / (Path(path).stem + ".rfgs")
        frontend.save_spectrogram(dest, spec)
        return f"{path},{dest},{spec.bands},{spec.frames}"

    _emit("path,spectrogram,bands,frames")
    for line in _map(run, args.files, args.jobs):
        _emit(line)


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, batch=args.batch, epochs_per_fold=args.epochs_per_fold, folds=args.folds,
                       cutmix=CutMixConfig(alpha=args.cutmix_alpha, enabled=not args.no_cutmix, prob=args.cutmix_prob),
                       swap_lr_augment=not args.no_swap, seed=args.seed)


def _initial_model(args, variant: str) -> ListenerNet:
    if args.mode != "def" and not args.donor:
        raise CliError(EXIT_DATA, "contract", f"init mode {args.mode!r} requires --donor")
    donor = load_checkpoint(args.donor) if args.donor else None
    if variant == FULL_REFERENCE and args.mode != "def":
        raise CliError(EXIT_DATA, "contract", f"init mode {args.mode!r} only applies to reference-free models")
    config = ModelConfig().with_variant(variant)
    if donor is not None:
        config = donor.config.with_variant(variant)
    return build_model(config, args.mode, donor=donor, seed=args.seed)


def cmd_train(args) -> None:
    variant = FULL_REFERENCE if args.variant == "fr" else REFERENCE_FREE
    model = _initial_model(args, variant)
    manifest = read_manifest(args.manifest)
    try:
        result = train(model, manifest, _train_config(args))
    except TrainingDivergedError as exc:
        exc.model.save(str(args.out) + ".lastgood")
        raise CliError(EXIT_NUMERIC, "numerical", f"{exc}; last good weights in {args.out}.lastgood") from exc
    result.model.save(args.out)
    if args.metrics:
        Path(args.metrics).write_text(result.metrics_csv(), encoding="utf-8")
    _emit(result.metrics_csv())


def cmd_transfer_init(args) -> None:
    model = _initial_model(args, REFERENCE_FREE)
    model.save(args.out)
    _emit(str(args.out))


def cmd_predict(args) -> None:
    model = _load_model(args.checkpoint)
    if model.config.variant != REFERENCE_FREE:
        raise CliError(EXIT_DATA, "contract", "predict needs a reference-free checkpoint")

    def run(path):
        d = predict_file(model, frontend.load_wav(path))
        lo, hi = confidence_interval(d, args.listeners, args.level)
        return (str(path), d.mu, d.log_a, d.std, lo, hi, args.listeners)

    rows = _map(run, args.files, args.jobs)
    _emit(evaluation.to_csv(("path", "mu", "log_a", "std", "ci_lo", "ci_hi", "n"), rows))


def cmd_simulate(args) -> None:
    if args.checkpoint:
        if not args.file:
            raise CliError(EXIT_USAGE, "usage", "--checkpoint needs --file")
        dist = predict_file(_load_model(args.checkpoint), frontend.load_wav(args.file))
    elif args.mu is not None and args.log_a is not None:
        dist = ScoreDistribution(args.mu, args.log_a)
    else:
        raise CliError(EXIT_USAGE, "usage", "give either --checkpoint/--file or --mu/--log-a")
    if args.n < 1:
        raise CliError(EXIT_DATA, "contract", f"--n must be >= 1, got {args.n}")
    raw = sample(dist, args.n, np.random.default_rng(args.seed))
    rows = []
    for i, s in enumerate(raw):
        clipped = not args.no_clip and (s < 0.0 or s > 100.0)
        rows.append((i, float(np.clip(s, 0.0, 100.0)) if not args.no_clip else float(s), int(clipped)))
    _emit(evaluation.to_csv(("listener", "score", "clipped"), rows))


def cmd_evaluate(args) -> None:
    model = _load_model(args.checkpoint)
    manifest = read_manifest(args.manifest)
    scores = score_manifest(model, manifest)
    rows = [(s.excerpt_id, s.system_id, s.predicted.mu, s.predicted.log_a, s.subjective_mean,
             s.subjective_ci[0], s.subjective_ci[1], s.n_listeners) for s in scores]
    table = evaluation.to_csv(("excerpt_id", "system_id", "pred_mu", "pred_log_a", "subj_mean", "subj_ci_lo",
                               "subj_ci_hi", "n"), rows)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    summary = evaluation.correlation_summary(scores)
    _emit(evaluation.to_csv(("metric", "value"), [("rp", summary["rp"]), ("rs", summary["rs"]),
                                                 ("mu", summary["mu"]), ("n", summary["n"])]))
    if args.per_excerpt:
        per = evaluation.per_excerpt_correlations(scores)
        _emit(evaluation.to_csv(("excerpt_id", "rp", "rs"), [(k, *v) for k, v in per.items()]))


def cmd_scaling_report(args) -> None:
    model = _load_model(args.checkpoint)
    manifest = read_manifest(args.manifest)
    store = FeatureStore(manifest, frames=model.config.frames)
    items = {}
    for (ex, sys_id), recs in manifest.items().items():
        items.setdefault(sys_id, []).append(recs[0])
    conds = args.conditions.split(",")
    missing = [c for c in conds if c not in items]
    if missing:
        raise CliError(EXIT_DATA, "contract", f"condition {missing[0]!r} not in manifest")

    def predict(rec):
        mu, la = model.predict_segments(store.model_input(rec, model.config.variant))
        return ScoreDistribution(float(mu.mean()), float(np.log(np.exp(la).mean())))

    text, rho = evaluation.scaling_report(predict, items, conds)
    _emit(text + f"spearman,{evaluation.fmt(rho)},monotone_defined={int(not math.isnan(rho))},,\n")


def cmd_bandwidth_scatter(args) -> None:
    model = _load_model(args.checkpoint)
    cache = {}

    def audio(p):
        if p not in cache:
            cache[p] = frontend.load_wav(p)
        return cache[p]

    if args.jobs > 1:
        _map(audio, args.files, args.jobs)
    try:
        text, r = evaluation.bandwidth_scatter(lambda p: predict_file(model, audio(p)),
                                               lambda p: frontend.estimate_bandwidth(audio(p)), args.files)
    except ValueError as exc:
        raise CliError(EXIT_DATA, "contract", str(exc)) from exc
    _emit(text + f"pearson,{evaluation.fmt(r)},\n")


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rfgml", description="Reference-free generative machine listener toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic listening-test corpus")
    s.add_argument("--out", help="output directory (default: $RFGML_DATA_DIR)")
    s.add_argument("--excerpts", type=int, default=20, help="number of source excerpts")
    s.add_argument("--levels", type=int, nargs="+", default=[1, 2, 3], help="coded ladder levels (1-4)")
    s.add_argument("--listeners", type=int, default=10, help="simulated listeners per condition")
    s.add_argument("--prefix", default="ex", help="excerpt id prefix")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("featurize", help="write Gammatone spectrogram blobs (.rfgs)")
    s.add_argument("files", nargs="+", help="input WAV files")
    s.add_argument("--out-dir", required=True, help="directory for .rfgs files")
    s.add_argument("--bands", type=int, default=64, help="number of Gammatone bands")
    s.add_argument("--jobs", type=int, default=1, help="parallel workers")
    s.set_defaults(func=cmd_featurize)

    def add_init(s):
        s.add_argument("--mode", choices=INIT_MODES, default="def", help="initialization mode")
        s.add_argument("--donor", help="full-reference donor checkpoint (required for deg, degF, all)")
        s.add_argument("--seed", type=int, default=0, help="random seed")

    s = sub.add_parser("train", help="train a listener model on a manifest")
    s.add_argument("--manifest", required=True, help="training manifest CSV")
    s.add_argument("--out", required=True, help="output checkpoint path")
    s.add_argument("--variant", choices=("rf", "fr"), default="rf", help="reference-free or full-reference model")
    add_init(s)
    s.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    s.add_argument("--batch", type=int, default=8, help="batch size")
    s.add_argument("--epochs-per-fold", type=int, default=10, help="epochs per fold")
    s.add_argument("--folds", type=int, default=5, help="number of folds")
    s.add_argument("--cutmix-alpha", type=float, default=0.7, help="Beta(alpha, alpha) parameter for CutMix")
    s.add_argument("--cutmix-prob", type=float, default=0.5, help="per-item CutMix probability")
    s.add_argument("--no-cutmix", action="store_true", help="disable CutMix")
    s.add_argument("--no-swap", action="store_true", help="disable L/R swap augmentation")
    s.add_argument("--metrics", help="write the per-epoch metrics CSV here")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("transfer-init", help="write an untrained reference-free checkpoint initialized from a donor")
    s.add_argument("--out", required=True, help="output checkpoint path")
    add_init(s)
    s.set_defaults(func=cmd_transfer_init)

    s = sub.add_parser("predict", help="predict score distributions for WAV files")
    s.add_argument("files", nargs="+", help="input WAV files")
    s.add_argument("--checkpoint", required=True, help="reference-free checkpoint")
    s.add_argument("--listeners", type=int, default=20, help="listener count N for the confidence interval")
    s.add_argument("--level", type=float, default=0.95, help="confidence level")
    s.add_argument("--jobs", type=int, default=1, help="parallel workers")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="sample simulated listener scores")
    s.add_argument("--n", type=int, required=True, help="number of listeners to simulate")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--checkpoint", help="checkpoint whose prediction for --file is sampled")
    s.add_argument("--file", help="WAV file to score")
    s.add_argument("--mu", type=float, help="explicit distribution location")
    s.add_argument("--log-a", type=float, help="explicit log scale")
    s.add_argument("--no-clip", action="store_true", help="report raw draws instead of clipping to [0, 100]")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("evaluate", help="correlate predictions with a listening-test manifest")
    s.add_argument("--checkpoint", required=True, help="model checkpoint")
    s.add_argument("--manifest", required=True, help="test manifest CSV")
    s.add_argument("--out", help="write per-(excerpt, system) table here")
    s.add_argument("--per-excerpt", action="store_true", help="also print per-excerpt correlations")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("scaling-report", help="mean predicted score along a condition ladder")
    s.add_argument("--checkpoint", required=True, help="model checkpoint")
    s.add_argument("--manifest", required=True, help="manifest holding the conditions")
    s.add_argument("--conditions", required=True, help="comma-separated conditions, best first")
    s.set_defaults(func=cmd_scaling_report)

    s = sub.add_parser("bandwidth-scatter", help="predicted score versus estimated bandwidth")
    s.add_argument("files", nargs="+", help="input WAV files")
    s.add_argument("--checkpoint", required=True, help="reference-free checkpoint")
    s.add_argument("--jobs", type=int, default=1, help="parallel workers")
    s.set_defaults(func=cmd_bandwidth_scatter)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except CliError as exc:
        code, kind, msg = exc.code, exc.kind, str(exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except TrainingDivergedError as exc:
        code, kind, msg = EXIT_NUMERIC, "numerical", str(exc)
    except FloatingPointError as exc:
        code, kind, msg = EXIT_NUMERIC, "numerical", str(exc)
    except (ManifestError, CheckpointError, frontend.AudioFormatError, ValueError, KeyError, OSError) as exc:
        code, kind, msg = EXIT_DATA, "data", str(exc)
    else:
        return 0
    msg = " ".join(msg.split())
    sys.stderr.write(f"error: code={code} kind={kind} message={msg}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
