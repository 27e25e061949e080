"""Scoring and the experiment protocol.

A repeated experiment runs R independent iterations of: balance the windows, split them by device, fit the normalizer
on the training side, featurize both sides, train, and score on the test side. Every iteration draws its seeds from
``derive_seed(master_seed, run, ...)``, so iterations may run concurrently and still produce the same summary.
"""
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
import csv
import io
import logging

import jinja2
import numpy as np
import yaml

from .dataset import (
    EventWindow,
    Preprocessing,
    WindowSpec,
    balance_sample,
    slice_windows,
    split,
    stack_arrays,
)
from .ensemble import EnsembleModel, ensemble_curve, fit_ensemble, member_accuracies, vote_predict_batch
from .executor import run_jobs
from .featurize import EDGE_KERNEL, CusumParams, parse_feature_set
from .ingest import DeviceHistory, fit_normalizer
from .nn.model import ModelConfig, TrainConfig, predict_batch, train
from .utils import derive_seed

l = logging.getLogger(__name__)

__all__ = (
    "METRIC_NAMES",
    "Metrics",
    "RunRecord",
    "MetricsSummary",
    "ExperimentConfig",
    "ExperimentManifest",
    "EnsembleResult",
    "compute_metrics",
    "repeated_experiment",
    "horizon_sweep",
    "ensemble_experiment",
    "score_ensemble",
    "prepare_split",
    "report_rows",
    "report",
    "load_report",
    "summaries_from_records",
)

METRIC_NAMES = ("precision", "recall", "f1", "accuracy")
ROW_FIELDS = ("feature_set", "horizon", "metric", "mean", "std", "R", "seed")


@dataclass(frozen=True)
class Metrics:
    """Confusion counts with failure as the positive class, and the scores derived from them.

    Zero denominators score 0.
    """

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    def scores(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def compute_metrics(predictions: Sequence[int], labels: Sequence[int]) -> Metrics:
    """Confusion counts of binary predictions against binary labels.

    :raises ValueError: if the lengths differ or nothing was supplied.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"predictions: {len(predictions)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("predictions: cannot score an empty set")
    positive = predictions == 1
    failed = labels == 1
    return Metrics(
        tp=int(np.sum(positive & failed)),
        fp=int(np.sum(positive & ~failed)),
        tn=int(np.sum(~positive & ~failed)),
        fn=int(np.sum(~positive & failed)),
    )


@dataclass(frozen=True)
class RunRecord:
    """One iteration of a repeated experiment."""

    index: int
    seed: int
    train_size: int
    test_size: int
    metrics: Metrics

    def to_dict(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "seed": self.seed,
            "train_size": self.train_size,
            "test_size": self.test_size,
            **asdict(self.metrics),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunRecord":
        return cls(
            index=data["index"],
            seed=data["seed"],
            train_size=data["train_size"],
            test_size=data["test_size"],
            metrics=Metrics(tp=data["tp"], fp=data["fp"], tn=data["tn"], fn=data["fn"]),
        )


@dataclass
class MetricsSummary:
    """Per-metric mean and population standard deviation over the runs of one experiment."""

    feature_set: str
    horizon: int
    seed: int
    runs: List[RunRecord]
    window_report: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.runs:
            raise ValueError("A summary needs at least one run")
        self.runs = sorted(self.runs, key=lambda r: r.index)

    @property
    def repeats(self) -> int:
        return len(self.runs)

    def values(self, metric: str) -> np.ndarray:
        if metric not in METRIC_NAMES:
            raise KeyError(f"metric: unknown metric {metric!r}")
        return np.array([getattr(r.metrics, metric) for r in self.runs])

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values(metric)))

    def std(self, metric: str) -> float:
        return float(np.std(self.values(metric)))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "feature_set": self.feature_set,
            "horizon": self.horizon,
            "seed": self.seed,
            "R": self.repeats,
            "mean": {m: self.mean(m) for m in METRIC_NAMES},
            "std": {m: self.std(m) for m in METRIC_NAMES},
            "windows": dict(self.window_report),
            "runs": [r.to_dict() for r in self.runs],
        }


def summaries_from_records(results: Iterable[Mapping[str, Any]]) -> List[MetricsSummary]:
    """Rebuild summaries from the stored per-run records of a report; means and deviations are recomputed."""
    return [
        MetricsSummary(
            feature_set=data["feature_set"],
            horizon=data["horizon"],
            seed=data["seed"],
            runs=[RunRecord.from_dict(r) for r in data["runs"]],
            window_report=dict(data.get("windows") or {}),
        )
        for data in results
    ]


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of the experiment protocol that affects results."""

    spec: WindowSpec = field(default_factory=WindowSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    repeats: int = 5
    test_fraction: float = 0.25
    cusum_params: CusumParams = field(default_factory=CusumParams)
    edge_kernel: Tuple[float, ...] = EDGE_KERNEL
    ensemble_k: int = 25

    def to_dict(self) -> Dict[str, Any]:
        return {
            "window": self.spec.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "repeats": self.repeats,
            "test_fraction": self.test_fraction,
            "cusum": {"init_period": self.cusum_params.init_period, "slack": float(self.cusum_params.slack)},
            "edge_kernel": [float(x) for x in self.edge_kernel],
            "ensemble_k": self.ensemble_k,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        return cls(
            spec=WindowSpec(**data["window"]),
            model=ModelConfig(**data["model"]),
            train=TrainConfig(**data["train"]),
            repeats=data["repeats"],
            test_fraction=data["test_fraction"],
            cusum_params=CusumParams(init_period=data["cusum"]["init_period"], slack=data["cusum"]["slack"]),
            edge_kernel=tuple(data["edge_kernel"]),
            ensemble_k=data["ensemble_k"],
        )


@dataclass
class ExperimentManifest:
    """What a report was produced from, in enough detail to run it again."""

    master_seed: int
    config: ExperimentConfig
    attribute_ids: List[str]
    feature_sets: List[str]
    horizons: List[int]
    resampling: str = "normal subset and train/test split redrawn every run"
    settings: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "master_seed": self.master_seed,
            "config": self.config.to_dict(),
            "attribute_ids": list(self.attribute_ids),
            "feature_sets": list(self.feature_sets),
            "horizons": list(self.horizons),
            "resampling": self.resampling,
            "settings": self.settings,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentManifest":
        return cls(
            master_seed=data["master_seed"],
            config=ExperimentConfig.from_dict(data["config"]),
            attribute_ids=list(data["attribute_ids"]),
            feature_sets=list(data["feature_sets"]),
            horizons=list(data["horizons"]),
            resampling=data["resampling"],
            settings=dict(data.get("settings") or {}),
        )


def prepare_split(
    windows: Sequence[EventWindow], attribute_ids: Sequence[str], feature_set: str, config: ExperimentConfig, seed: int
) -> Tuple[Preprocessing, List[EventWindow], List[EventWindow]]:
    """Balance, split by device, fit the normalizer on the training side only, and featurize both sides."""
    balanced = balance_sample(windows, derive_seed(seed, "balance"))
    train_windows, test_windows = split(balanced, config.test_fraction, derive_seed(seed, "split"))
    prep = Preprocessing(
        spec=config.spec,
        attribute_ids=tuple(attribute_ids),
        normalizer=fit_normalizer([w.matrix for w in train_windows]),
        features=frozenset(parse_feature_set(feature_set)),
        cusum_params=config.cusum_params,
        edge_kernel=tuple(config.edge_kernel),
    )
    return prep, prep.prepare(train_windows), prep.prepare(test_windows)


def repeated_experiment(
    histories: Sequence[DeviceHistory],
    attribute_ids: Sequence[str],
    feature_set: str,
    config: ExperimentConfig,
    master_seed: int,
    executor: Optional[Executor] = None,
) -> MetricsSummary:
    """Score one feature set over ``config.repeats`` independent balance / split / train / test iterations."""
    if config.repeats < 1:
        raise ValueError(f"evaluate.repeats must be at least 1, got {config.repeats}")
    windows, window_report = slice_windows(histories, config.spec)

    def run_one(index: int) -> RunRecord:
        seed = derive_seed(master_seed, index, "run")
        _, train_windows, test_windows = prepare_split(windows, attribute_ids, feature_set, config, seed)
        classifier = train(config.model, replace(config.train, seed=derive_seed(seed, "init")), train_windows)
        x_test, y_test = stack_arrays(test_windows)
        metrics = compute_metrics(predict_batch(classifier, x_test), y_test)
        l.debug("run %d of %s: f1 %.4f", index, feature_set, metrics.f1)
        return RunRecord(index, seed, len(train_windows), len(test_windows), metrics)

    runs = run_jobs(run_one, list(range(config.repeats)), executor, name="run")
    summary = MetricsSummary(feature_set, config.spec.horizon, master_seed, runs, window_report.to_dict())
    l.info(
        "%s at horizon %d: f1 %.4f +- %.4f over %d runs",
        feature_set,
        config.spec.horizon,
        summary.mean("f1"),
        summary.std("f1"),
        summary.repeats,
    )
    return summary


def horizon_sweep(
    histories: Sequence[DeviceHistory],
    attribute_ids: Sequence[str],
    feature_set: str,
    horizons: Sequence[int],
    config: ExperimentConfig,
    master_seed: int,
    executor: Optional[Executor] = None,
) -> List[MetricsSummary]:
    """`repeated_experiment` once per horizon, with windows re-sliced each time."""
    return [
        repeated_experiment(
            histories,
            attribute_ids,
            feature_set,
            replace(config, spec=replace(config.spec, horizon=n)),
            master_seed,
            executor,
        )
        for n in horizons
    ]


@dataclass
class EnsembleResult:
    """How a bag compares to its own members on a held-out split."""

    feature_set: str
    master_seed: int
    metrics: Metrics
    member_accuracies: List[float]
    curve: List[Tuple[int, float]]
    ensemble: EnsembleModel
    preprocessing: Preprocessing

    @property
    def mean_member_accuracy(self) -> float:
        return float(np.mean(self.member_accuracies))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "feature_set": self.feature_set,
            "seed": self.master_seed,
            "k": self.ensemble.k,
            "ensemble": {**asdict(self.metrics), **self.metrics.scores()},
            "mean_member_accuracy": self.mean_member_accuracy,
            "member_accuracies": list(self.member_accuracies),
            "curve": [{"members": m, "accuracy": a} for m, a in self.curve],
        }


def ensemble_experiment(
    histories: Sequence[DeviceHistory],
    attribute_ids: Sequence[str],
    feature_set: str,
    config: ExperimentConfig,
    master_seed: int,
    executor: Optional[Executor] = None,
) -> EnsembleResult:
    """Fit a ``config.ensemble_k`` bag on one balanced training split and score it and each member on the test side."""
    windows, _ = slice_windows(histories, config.spec)
    prep, train_windows, test_windows = prepare_split(windows, attribute_ids, feature_set, config, master_seed)
    return score_ensemble(prep, train_windows, test_windows, feature_set, config, master_seed, executor)


def score_ensemble(
    prep: Preprocessing,
    train_windows: Sequence[EventWindow],
    test_windows: Sequence[EventWindow],
    feature_set: str,
    config: ExperimentConfig,
    master_seed: int,
    executor: Optional[Executor] = None,
) -> EnsembleResult:
    """Fit the bag on already prepared windows and score it against its members."""
    ensemble = fit_ensemble(config.ensemble_k, config.model, config.train, train_windows, master_seed, executor)
    for member in ensemble.members:
        member.attachments = prep.to_dict()
    x_test, y_test = stack_arrays(test_windows)
    votes, _ = vote_predict_batch(ensemble, x_test)
    result = EnsembleResult(
        feature_set=feature_set,
        master_seed=master_seed,
        metrics=compute_metrics(votes, y_test),
        member_accuracies=member_accuracies(ensemble, x_test, y_test),
        curve=ensemble_curve(ensemble, x_test, y_test),
        ensemble=ensemble,
        preprocessing=prep,
    )
    l.info(
        "Ensemble of %d: accuracy %.4f, mean member accuracy %.4f",
        ensemble.k,
        result.metrics.accuracy,
        result.mean_member_accuracy,
    )
    return result


def report_rows(summaries: Iterable[MetricsSummary]) -> List[Dict[str, Any]]:
    """One row per summary and metric, with the fixed field names of the result files."""
    return [
        {
            "feature_set": s.feature_set,
            "horizon": s.horizon,
            "metric": metric,
            "mean": s.mean(metric),
            "std": s.std(metric),
            "R": s.repeats,
            "seed": s.seed,
        }
        for s in summaries
        for metric in METRIC_NAMES
    ]


_templates = jinja2.Environment(
    keep_trailing_newline=True,
    trim_blocks=True,
    lstrip_blocks=True,
    undefined=jinja2.StrictUndefined,
)


def _pad_cells(cells: Sequence[str], widths: Sequence[int]) -> List[str]:
    # feature set left, numbers right
    return [c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))]


_templates.filters["pad_cells"] = _pad_cells

TABLE_TEMPLATE = """\
{% for line in lines %}
{{ line | pad_cells(widths) | join("  ") }}
{% endfor %}

master seed {{ manifest.master_seed }}, window length {{ manifest.config.window.window_length }}, \
turn-on cutoff {{ manifest.config.window.turn_on_cutoff }}, test fraction {{ manifest.config.test_fraction }}
resampling: {{ manifest.resampling }}
"""


def _render_table(summaries: Sequence[MetricsSummary], manifest: ExperimentManifest) -> str:
    lines = [["feature_set", "horizon", "R"] + list(METRIC_NAMES)]
    for s in summaries:
        lines.append(
            [s.feature_set, str(s.horizon), str(s.repeats)]
            + [f"{s.mean(m):.4f} +- {s.std(m):.4f}" for m in METRIC_NAMES]
        )
    widths = [max(len(line[i]) for line in lines) for i in range(len(lines[0]))]
    return _templates.from_string(TABLE_TEMPLATE).render(lines=lines, widths=widths, manifest=manifest.to_dict())


def report(
    summaries: Sequence[MetricsSummary], manifest: ExperimentManifest, out_dir: Union[str, Path]
) -> Dict[str, Path]:
    """Write ``report.yaml`` (per-run records and manifest), ``report.txt`` (aligned table) and ``report.csv``.

    :return: the written paths by format.
    """
    if not summaries:
        raise ValueError("Cannot write a report without results")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = report_rows(summaries)

    payload = {"manifest": manifest.to_dict(), "results": [s.to_dict() for s in summaries], "rows": rows}
    paths = {"yaml": out_dir / "report.yaml", "txt": out_dir / "report.txt", "csv": out_dir / "report.csv"}
    with open(paths["yaml"], "w", encoding="utf-8") as fp:
        yaml.safe_dump(payload, fp, sort_keys=True)

    with open(paths["txt"], "w", encoding="utf-8") as fp:
        fp.write(_render_table(summaries, manifest))

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    with open(paths["csv"], "w", encoding="utf-8") as fp:
        fp.write(buf.getvalue())

    l.info("Wrote report of %d results to %s", len(summaries), out_dir)
    return paths


def load_report(path: Union[str, Path]) -> Tuple[List[MetricsSummary], ExperimentManifest]:
    """Read back a ``report.yaml`` (or the directory holding one)."""
    path = Path(path)
    if path.is_dir():
        path = path / "report.yaml"
    with open(path, "r", encoding="utf-8") as fp:
        payload = yaml.safe_load(fp)
    if not isinstance(payload, dict) or "results" not in payload or "manifest" not in payload:
        raise ValueError(f"{path} is not a smartfeat report")
    return summaries_from_records(payload["results"]), ExperimentManifest.from_dict(payload["manifest"])

