"""The ``smartfeat`` command, installed as ``smartfeat`` and ``sf``.

The help screen should look something like this:

.. code::

    $ smartfeat --help
      usage: smartfeat [-h] {ingest,synth,derive,render,train,ensemble,evaluate,sweep,predict,gradcheck} ...

    positional arguments:
      {ingest,synth,derive,render,train,ensemble,evaluate,sweep,predict,gradcheck}
        ingest              Parse daily-snapshot CSV files into a corpus
        synth               Generate a synthetic corpus from a preset
        derive              Slice, normalize and featurize a corpus into a dataset
        render              Write one device's feature channels as PGM images
        train               Train a single classifier
        ensemble            Train a bagged ensemble
        evaluate            Repeated experiments, one per feature set
        sweep               Repeated experiments, one per horizon
        predict             Classify every device of a corpus
        gradcheck           Check backpropagation against finite differences

Every subcommand takes ``--seed``, ``--jobs``, ``--config`` and ``--verbose``. Settings come from smartfeat.yaml (see
`smartfeat.config`) and flags override them.

Exit status is 0 on success, 1 on a usage or data error (with a one-line ``error:`` diagnostic on stderr), and 2 for
malformed command lines. ``gradcheck`` exits 1 if the gradient error is at or above its tolerance.
"""
from typing import Callable, List, Optional, Sequence, Tuple
from dataclasses import asdict, replace
from pathlib import Path
import argparse
import csv
import logging
import sys

import numpy as np
import yaml

from ..config import RunConfig, load_config
from ..dataset import (
    Dataset,
    EventWindow,
    Preprocessing,
    balance_sample,
    load_dataset,
    save_dataset,
    slice_window,
    slice_windows,
    split,
    stack_arrays,
)
from ..ensemble import EnsembleModel, load_ensemble, save_ensemble, vote_predict_batch
from ..evaluation import (
    ExperimentManifest,
    MetricsSummary,
    compute_metrics,
    horizon_sweep,
    prepare_split,
    repeated_experiment,
    report,
    score_ensemble,
)
from ..executor import make_executor
from ..featurize import build_feature_stack, feature_set_name, parse_feature_set, render_stack
from ..ingest import (
    Corpus,
    ParseReport,
    apply_normalizer,
    assemble_histories,
    dump_snapshots,
    fit_normalizer,
    load_corpus,
    parse_snapshots,
    save_corpus,
    select_models,
)
from ..nn.model import (
    OPTIMIZERS,
    Classifier,
    ModelConfig,
    TrainingDiverged,
    forward,
    gradient_check,
    load,
    predict_batch,
    save,
    train,
)
from ..synth import generate, preset, scenario_presets
from ..utils import derive_seed

l = logging.getLogger(__name__)

__all__ = ("run", "build_parser", "GRADCHECK_TOLERANCE")

GRADCHECK_TOLERANCE = 1e-4

Handler = Callable[[RunConfig, argparse.Namespace], int]

# pylint: disable=missing-function-docstring


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Master seed (default: from the config file, else 0)")
    common.add_argument("--jobs", "-j", type=int, default=None, help="Worker threads (default: physical cores)")
    common.add_argument("--config", type=Path, default=None, help="Path to smartfeat.yaml")
    common.add_argument("--verbose", "-v", action="store_true", help="Log debug output")
    return common


def _window_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--window-length", type=int, default=None, help="Days per window")
    parser.add_argument("--horizon", type=int, default=None, help="Most recent days removed before windowing")
    parser.add_argument("--turn-on-cutoff", type=int, default=None, help="Minimum lifetime in days")


def _train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--learning-rate", type=float, default=None)
    parser.add_argument("--optimizer", choices=OPTIMIZERS, default=None)
    parser.add_argument(
        "--full-scale", action="store_const", const=True, default=None, help="256/256/160 layer sizes"
    )


def _split_flags(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--corpus", type=Path, help="Corpus file; the normalizer is fitted on the training side")
    source.add_argument(
        "--dataset",
        type=Path,
        help="Dataset file from `derive`; keeps its features, refits the normalizer on the training side",
    )
    parser.add_argument("--features", default=None, help="Feature-set expression, e.g. all,-smooth")
    parser.add_argument("--test-fraction", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="smartfeat")
    subparsers = parser.add_subparsers(dest=argparse.SUPPRESS, required=True)

    parser_ingest = subparsers.add_parser(
        "ingest", parents=[common], help="Parse daily-snapshot CSV files into a corpus"
    )
    parser_ingest.add_argument("csv", nargs="+", type=Path, help="Snapshot CSV files")
    parser_ingest.add_argument("--out", "-o", type=Path, required=True, help="Corpus file to write")
    parser_ingest.add_argument(
        "--model", dest="models", action="append", default=None, help="Only keep devices of this model"
    )
    parser_ingest.set_defaults(func=cmd_ingest)

    parser_synth = subparsers.add_parser("synth", parents=[common], help="Generate a synthetic corpus from a preset")
    parser_synth.add_argument("--preset", choices=sorted(scenario_presets()), default="noisy-trend")
    parser_synth.add_argument("--devices", type=int, default=None, help="Override the preset's device count")
    parser_synth.add_argument("--out", "-o", type=Path, required=True, help="Corpus file to write")
    parser_synth.add_argument("--csv", type=Path, default=None, help="Also write the daily-snapshot CSV")
    parser_synth.set_defaults(func=cmd_synth)

    parser_derive = subparsers.add_parser(
        "derive", parents=[common], help="Slice, normalize and featurize a corpus into a dataset"
    )
    parser_derive.add_argument("--corpus", type=Path, required=True)
    parser_derive.add_argument("--out", "-o", type=Path, required=True, help="Dataset file to write")
    parser_derive.add_argument("--features", default=None, help="Feature-set expression")
    _window_flags(parser_derive)
    parser_derive.set_defaults(func=cmd_derive)

    parser_render = subparsers.add_parser(
        "render", parents=[common], help="Write one device's feature channels as PGM images"
    )
    parser_render.add_argument("--corpus", type=Path, required=True)
    parser_render.add_argument("--serial", required=True, help="Serial number of the device")
    parser_render.add_argument("--out-dir", "-o", type=Path, default=Path("."), help="Where to put the images")
    parser_render.add_argument("--features", default=None, help="Feature-set expression")
    _window_flags(parser_render)
    parser_render.set_defaults(func=cmd_render)

    parser_train = subparsers.add_parser("train", parents=[common], help="Train a single classifier")
    _split_flags(parser_train)
    parser_train.add_argument("--out", "-o", type=Path, required=True, help="Model file to write")
    _window_flags(parser_train)
    _train_flags(parser_train)
    parser_train.set_defaults(func=cmd_train)

    parser_ensemble = subparsers.add_parser("ensemble", parents=[common], help="Train a bagged ensemble")
    _split_flags(parser_ensemble)
    parser_ensemble.add_argument("--out", "-o", type=Path, required=True, help="Ensemble directory to write")
    parser_ensemble.add_argument("--k", type=int, default=None, help="Number of members")
    _window_flags(parser_ensemble)
    _train_flags(parser_ensemble)
    parser_ensemble.set_defaults(func=cmd_ensemble)

    parser_evaluate = subparsers.add_parser(
        "evaluate", parents=[common], help="Repeated experiments, one per feature set"
    )
    parser_evaluate.add_argument("--corpus", type=Path, required=True)
    parser_evaluate.add_argument(
        "--features",
        dest="feature_sets",
        action="append",
        default=None,
        help="Feature set to score; repeat to compare (default: original and the configured set)",
    )
    parser_evaluate.add_argument("--repeats", "-R", type=int, default=None)
    parser_evaluate.add_argument("--test-fraction", type=float, default=None)
    parser_evaluate.add_argument("--out-dir", "-o", type=Path, required=True, help="Report directory")
    _window_flags(parser_evaluate)
    _train_flags(parser_evaluate)
    parser_evaluate.set_defaults(func=cmd_evaluate)

    parser_sweep = subparsers.add_parser("sweep", parents=[common], help="Repeated experiments, one per horizon")
    parser_sweep.add_argument("--corpus", type=Path, required=True)
    parser_sweep.add_argument("--features", default=None, help="Feature-set expression")
    parser_sweep.add_argument("--horizons", type=_int_list, default=None, help="Comma separated, e.g. 1,10,15")
    parser_sweep.add_argument("--repeats", "-R", type=int, default=None)
    parser_sweep.add_argument("--test-fraction", type=float, default=None)
    parser_sweep.add_argument("--out-dir", "-o", type=Path, required=True, help="Report directory")
    _window_flags(parser_sweep)
    _train_flags(parser_sweep)
    parser_sweep.set_defaults(func=cmd_sweep)

    parser_predict = subparsers.add_parser("predict", parents=[common], help="Classify every device of a corpus")
    parser_predict.add_argument("--model", type=Path, required=True, help="Model file or ensemble directory")
    parser_predict.add_argument("--corpus", type=Path, required=True)
    parser_predict.add_argument("--out", "-o", type=Path, default=None, help="CSV file (default: stdout)")
    parser_predict.set_defaults(func=cmd_predict)

    parser_gradcheck = subparsers.add_parser(
        "gradcheck", parents=[common], help="Check backpropagation against finite differences"
    )
    parser_gradcheck.add_argument("--configs", type=int, default=3, help="Number of random small networks")
    parser_gradcheck.set_defaults(func=cmd_gradcheck)

    return parser


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from e


def _resolve(args: argparse.Namespace) -> RunConfig:
    """Load the config file and apply every flag that was given."""
    cfg = load_config(args.config)

    def given(*names: str):
        return {name: getattr(args, name) for name in names if getattr(args, name, None) is not None}

    model = cfg.model
    if getattr(args, "full_scale", None):
        model = replace(model, n1=256, n2=256, fc=160)
    horizons = getattr(args, "horizons", None)
    return cfg.override(
        seed=args.seed,
        jobs=args.jobs,
        features=getattr(args, "features", None),
        window=replace(cfg.window, **given("window_length", "horizon", "turn_on_cutoff")),
        model=model,
        full_scale=True if getattr(args, "full_scale", None) else None,
        train=replace(cfg.train, **given("epochs", "batch_size", "learning_rate", "optimizer")),
        ensemble_k=getattr(args, "k", None),
        repeats=getattr(args, "repeats", None),
        test_fraction=getattr(args, "test_fraction", None),
        horizons=list(horizons) if horizons is not None else None,
    )


def _dump(payload) -> None:
    sys.stdout.write(yaml.safe_dump(payload, sort_keys=True))


def cmd_ingest(cfg: RunConfig, args: argparse.Namespace) -> int:
    report_ = ParseReport()
    records = []
    for path in args.csv:
        before = report_.rows
        with open(path, "r", encoding="utf-8-sig", newline="") as fp:
            records.extend(parse_snapshots(fp, cfg.attributes, report_))
        report_.rows_per_file[str(path)] = report_.rows - before
    histories = select_models(assemble_histories(records, cfg.attributes, report_), args.models)
    if not histories:
        raise ValueError(f"models: no device in the input matches {args.models}")
    save_corpus(args.out, Corpus(list(cfg.attributes), histories, report_.to_dict()))
    _dump({"devices": len(histories), "failed": sum(h.failed for h in histories), "report": report_.to_dict()})
    return 0


def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> int:
    overrides = {"seed": cfg.seed}
    if args.devices is not None:
        overrides["devices"] = args.devices
    corpus = generate(preset(args.preset, **overrides))
    save_corpus(args.out, corpus)
    if args.csv is not None:
        with open(args.csv, "w", encoding="utf-8", newline="") as fp:
            dump_snapshots(corpus.histories, corpus.attribute_ids, fp)
    _dump(
        {
            "preset": args.preset,
            "seed": cfg.seed,
            "devices": len(corpus.histories),
            "failed": sum(h.failed for h in corpus.histories),
        }
    )
    return 0


def cmd_derive(cfg: RunConfig, args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    windows, window_report = slice_windows(corpus.histories, cfg.window)
    if not windows:
        raise ValueError(f"window: no device of {args.corpus} has enough history for {cfg.window.to_dict()}")
    prep = Preprocessing(
        spec=cfg.window,
        attribute_ids=tuple(corpus.attribute_ids),
        normalizer=fit_normalizer([w.matrix for w in windows]),
        features=frozenset(parse_feature_set(cfg.features)),
        cusum_params=cfg.cusum,
        edge_kernel=tuple(cfg.edge_kernel),
    )
    dataset = Dataset(prep, prep.prepare(windows), {"windows": window_report.to_dict(), "features": cfg.features})
    save_dataset(args.out, dataset)
    _dump({"windows": window_report.to_dict(), "channels": prep.n_channels, "features": cfg.features})
    return 0


def cmd_render(cfg: RunConfig, args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    history = corpus.by_serial(args.serial)
    window = slice_window(history, cfg.window)
    if window is None:
        raise ValueError(
            f"serial: {args.serial} is too short or a turn-on failure for the window {cfg.window.to_dict()}"
        )
    normalizer = fit_normalizer(corpus.histories)
    stack = build_feature_stack(
        apply_normalizer(normalizer, window.matrix), parse_feature_set(cfg.features), cfg.cusum, cfg.edge_kernel
    )
    args.out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for feature, image in render_stack(stack).items():
        path = args.out_dir / f"{args.serial}-{feature.slug}.pgm"
        path.write_bytes(image)
        written.append(str(path))
    _dump({"serial": args.serial, "label": window.label, "images": written})
    return 0


def _training_split(
    cfg: RunConfig, args: argparse.Namespace
) -> Tuple[Preprocessing, List[EventWindow], List[EventWindow]]:
    if args.corpus is not None:
        corpus = load_corpus(args.corpus)
        windows, _ = slice_windows(corpus.histories, cfg.window)
        return prepare_split(windows, corpus.attribute_ids, cfg.features, cfg.experiment(), cfg.seed)

    dataset = load_dataset(args.dataset)
    stored = dataset.preprocessing
    if args.features is not None and frozenset(parse_feature_set(args.features)) != stored.features:
        raise ValueError(
            f"features: {args.dataset} was derived with {feature_set_name(stored.features)!r}, "
            f"not {args.features!r}; derive it again or drop --features"
        )
    balanced = balance_sample(dataset.windows, derive_seed(cfg.seed, "balance"))
    train_windows, test_windows = split(balanced, cfg.test_fraction, derive_seed(cfg.seed, "split"))
    # the stored stacks were scaled with every window in view; refit on the training side
    prep = replace(stored, normalizer=fit_normalizer([w.matrix for w in train_windows]))
    return prep, prep.prepare(train_windows), prep.prepare(test_windows)


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    prep, train_windows, test_windows = _training_split(cfg, args)
    classifier = train(cfg.model, replace(cfg.train, seed=derive_seed(cfg.seed, "init")), train_windows)
    classifier.attachments = prep.to_dict()
    save(classifier, args.out)
    x_test, y_test = stack_arrays(test_windows)
    metrics = compute_metrics(predict_batch(classifier, x_test), y_test)
    _dump(
        {
            "feature_set": feature_set_name(prep.features),
            "seed": cfg.seed,
            "train_size": len(train_windows),
            "test_size": len(test_windows),
            "epochs_run": classifier.epochs_run,
            "test": {**asdict(metrics), **metrics.scores()},
        }
    )
    return 0


def cmd_ensemble(cfg: RunConfig, args: argparse.Namespace) -> int:
    prep, train_windows, test_windows = _training_split(cfg, args)
    executor = make_executor(cfg.jobs)
    try:
        result = score_ensemble(
            prep,
            train_windows,
            test_windows,
            feature_set_name(prep.features),
            cfg.experiment(),
            cfg.seed,
            executor,
        )
    finally:
        if executor is not None:
            executor.shutdown()
    save_ensemble(args.out, result.ensemble)
    _dump(result.to_dict())
    return 0


def _write_report(cfg: RunConfig, summaries: List[MetricsSummary], attribute_ids, feature_sets, horizons, out_dir):
    settings = cfg.to_dict()
    settings.pop("jobs")
    manifest = ExperimentManifest(
        master_seed=cfg.seed,
        config=cfg.experiment(),
        attribute_ids=list(attribute_ids),
        feature_sets=list(feature_sets),
        horizons=list(horizons),
        settings=settings,
    )
    paths = report(summaries, manifest, out_dir)
    sys.stdout.write(paths["txt"].read_text(encoding="utf-8"))


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    feature_sets = args.feature_sets or ["original", cfg.features]
    if not args.feature_sets and parse_feature_set(cfg.features) == parse_feature_set("original"):
        feature_sets = ["original"]
    for expr in feature_sets:
        parse_feature_set(expr)
    corpus = load_corpus(args.corpus)
    executor = make_executor(cfg.jobs)
    try:
        summaries = [
            repeated_experiment(corpus.histories, corpus.attribute_ids, expr, cfg.experiment(), cfg.seed, executor)
            for expr in feature_sets
        ]
    finally:
        if executor is not None:
            executor.shutdown()
    _write_report(cfg, summaries, corpus.attribute_ids, feature_sets, [cfg.window.horizon], args.out_dir)
    return 0


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    if not cfg.horizons:
        raise ValueError("horizons: need at least one horizon")
    corpus = load_corpus(args.corpus)
    executor = make_executor(cfg.jobs)
    try:
        summaries = horizon_sweep(
            corpus.histories,
            corpus.attribute_ids,
            cfg.features,
            cfg.horizons,
            cfg.experiment(),
            cfg.seed,
            executor,
        )
    finally:
        if executor is not None:
            executor.shutdown()
    _write_report(cfg, summaries, corpus.attribute_ids, [cfg.features], cfg.horizons, args.out_dir)
    return 0


def _load_predictor(path: Path) -> Tuple[object, Preprocessing]:
    predictor: object
    if path.is_dir():
        predictor = load_ensemble(path)
    elif path.exists():
        predictor = load(path)
    else:
        raise FileNotFoundError(f"model: no such file or directory {path}")
    attachments = predictor.attachments  # type: ignore[attr-defined]
    if not attachments:
        raise ValueError(f"model: {path} carries no preprocessing settings")
    return predictor, Preprocessing.from_dict(attachments)


def cmd_predict(cfg: RunConfig, args: argparse.Namespace) -> int:
    predictor, prep = _load_predictor(args.model)
    corpus = load_corpus(args.corpus)
    columns = []
    for attribute in prep.attribute_ids:
        if attribute not in corpus.attribute_ids:
            raise ValueError(f"attributes: the model was trained on {attribute}, which {args.corpus} lacks")
        columns.append(corpus.attribute_ids.index(attribute))

    windows = []
    for history in corpus.histories:
        window = slice_window(replace(history, values=history.values[:, columns]), prep.spec)
        if window is not None:
            windows.append(window)
    skipped = len(corpus.histories) - len(windows)
    if skipped:
        l.warning("Skipped %d devices too short for the model's window", skipped)
    if not windows:
        raise ValueError(f"window: no device of {args.corpus} has enough history for {prep.spec.to_dict()}")
    inputs, _ = stack_arrays(prep.prepare(windows))

    if isinstance(predictor, EnsembleModel):
        classes, proportions = vote_predict_batch(predictor, inputs)
    else:
        assert isinstance(predictor, Classifier)
        proportions = forward(predictor, inputs)
        classes = predict_batch(predictor, inputs)

    out = open(args.out, "w", encoding="utf-8", newline="") if args.out is not None else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["serial_number", "label", "predicted", "p_failure"])
        for window, cls, probs in zip(windows, classes, proportions):
            writer.writerow([window.serial, window.label, int(cls), f"{float(probs[-1]):.6f}"])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_gradcheck(cfg: RunConfig, args: argparse.Namespace) -> int:
    if args.configs < 1:
        raise ValueError(f"configs must be at least 1, got {args.configs}")
    worst = 0.0
    unchecked = 0
    for i in range(args.configs):
        seed = derive_seed(cfg.seed, i, "gradcheck")
        rng = np.random.default_rng(seed)
        config = ModelConfig(
            n1=int(rng.integers(2, 5)),
            k1=int(rng.integers(2, 4)),
            n2=int(rng.integers(2, 5)),
            k2=int(rng.integers(2, 4)),
            pool=2,
            fc=int(rng.integers(3, 7)),
            in_channels=int(rng.integers(2, 6)),
            length=int(rng.integers(12, 17)),
        )
        result = gradient_check(config, seed)
        print(
            f"config {i}: channels {config.in_channels} length {config.length} "
            f"conv {config.n1}x{config.k1} {config.n2}x{config.k2} fc {config.fc}: "
            f"relative error {result.max_error:.3e} over {result.checked} entries"
        )
        worst = max(worst, result.max_error)
        if not result.checked:
            unchecked += 1
            l.error("config %d: every sampled entry sat on a kink, nothing was checked", i)
    print(f"max relative error: {worst:.3e}")
    return 0 if worst < GRADCHECK_TOLERANCE and not unchecked else 1


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` (default ``sys.argv[1:]``), run the subcommand, and return the exit status."""
    logging.basicConfig()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.getLogger("smartfeat").setLevel("DEBUG")
    func: Handler = args.func
    try:
        return func(_resolve(args), args)
    except (ValueError, KeyError, TypeError, FileNotFoundError, TrainingDiverged) as e:
        message = e.args[0] if isinstance(e, KeyError) and e.args else e
        l.error("%s failed", func.__name__, exc_info=args.verbose)
        print(f"error: {message}", file=sys.stderr)
        return 1


def _main() -> Optional[int]:
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(_main())
