"""Bagging: k classifiers, each trained on its own bootstrap resample of the training windows, combined by plurality
vote.

Member ``i`` draws its resample from ``derive_seed(master_seed, i, "bootstrap")`` and initializes its weights from
``derive_seed(master_seed, i, "init")``, so members can be fitted in any order, on any number of workers, and the
ensemble comes out the same.
"""
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
from concurrent.futures import Executor
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
import logging

import numpy as np
import yaml

from .dataset import EventWindow
from .executor import run_jobs
from .nn.model import (
    Batch,
    Classifier,
    ModelConfig,
    TrainConfig,
    TrainingDiverged,
    as_arrays,
    load,
    predict_batch,
    save,
    train,
)
from .utils import derive_seed

l = logging.getLogger(__name__)

__all__ = (
    "EnsembleModel",
    "member_seeds",
    "fit_ensemble",
    "vote_predict",
    "vote_predict_batch",
    "member_accuracies",
    "ensemble_curve",
    "save_ensemble",
    "load_ensemble",
)

MANIFEST = "manifest.yaml"


@dataclass
class EnsembleModel:
    """A bag of classifiers sharing one model config."""

    members: List[Classifier]
    master_seed: int

    def __post_init__(self):
        if not self.members:
            raise ValueError("An ensemble needs at least one member")
        configs = {m.config for m in self.members}
        if len(configs) != 1:
            raise ValueError("Ensemble members must share one model config")

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def config(self) -> ModelConfig:
        return self.members[0].config

    @property
    def n_class(self) -> int:
        return self.config.n_class

    @property
    def attachments(self) -> Dict[str, Any]:
        return self.members[0].attachments


def member_seeds(master_seed: int, index: int) -> Tuple[int, int]:
    """The bootstrap seed and the weight-init seed of member ``index``."""
    return derive_seed(master_seed, index, "bootstrap"), derive_seed(master_seed, index, "init")


def fit_ensemble(
    k: int,
    model_config: ModelConfig,
    train_config: TrainConfig,
    windows: Batch,
    master_seed: int,
    executor: Optional[Executor] = None,
) -> EnsembleModel:
    """Train ``k`` members on bootstrap resamples (with replacement, same size as the input) of ``windows``.

    :raises TrainingDiverged: with ``estimator`` set to the index of the member that diverged.
    """
    if k < 1:
        raise ValueError(f"ensemble.k must be at least 1, got {k}")
    x, y = as_arrays(windows)
    if len(x) == 0:
        raise ValueError("Cannot fit an ensemble on an empty set of windows")
    if not model_config.in_channels or not model_config.length:
        model_config = model_config.for_input(x.shape[1], x.shape[2])

    def fit_one(index: int) -> Classifier:
        bootstrap_seed, init_seed = member_seeds(master_seed, index)
        picks = np.random.default_rng(bootstrap_seed).integers(0, len(x), size=len(x))
        try:
            return train(model_config, replace(train_config, seed=init_seed), (x[picks], y[picks]))
        except TrainingDiverged as e:
            e.estimator = index
            raise

    members = run_jobs(fit_one, list(range(k)), executor, name="estimator")
    l.info("Fitted an ensemble of %d members", k)
    return EnsembleModel(members, master_seed)


def _inputs(windows: Union[Sequence[EventWindow], np.ndarray]) -> np.ndarray:
    if isinstance(windows, np.ndarray):
        return windows
    return as_arrays(windows)[0]


def _member_predictions(ensemble: EnsembleModel, inputs: np.ndarray) -> np.ndarray:
    return np.stack([predict_batch(member, inputs) for member in ensemble.members])


def _tally(predictions: np.ndarray, n_class: int) -> np.ndarray:
    counts = np.zeros((predictions.shape[1], n_class), dtype=np.int64)
    for row in predictions:
        counts[np.arange(len(row)), row] += 1
    return counts


def _plurality(counts: np.ndarray) -> np.ndarray:
    # ties go to the highest class index
    return counts.shape[1] - 1 - np.argmax(counts[:, ::-1], axis=1)


def vote_predict(ensemble: EnsembleModel, window: Union[EventWindow, np.ndarray]) -> Tuple[int, List[Fraction]]:
    """The plurality class and the exact vote proportion of every class. Ties go toward failure."""
    if isinstance(window, EventWindow):
        inputs = _inputs([window])
    else:
        inputs = np.asarray(window, dtype=np.float64)[None]
    counts = _tally(_member_predictions(ensemble, inputs), ensemble.n_class)[0]
    return int(_plurality(counts[None])[0]), [Fraction(int(c), ensemble.k) for c in counts]


def vote_predict_batch(
    ensemble: EnsembleModel, windows: Union[Sequence[EventWindow], np.ndarray]
) -> Tuple[np.ndarray, np.ndarray]:
    """`vote_predict` over a batch: the classes and an ``N x n_class`` matrix of vote proportions."""
    counts = _tally(_member_predictions(ensemble, _inputs(windows)), ensemble.n_class)
    return _plurality(counts), counts / ensemble.k


def member_accuracies(
    ensemble: EnsembleModel, windows: Union[Sequence[EventWindow], np.ndarray], labels: np.ndarray
) -> List[float]:
    """The accuracy of every member on its own."""
    labels = np.asarray(labels)
    return [float(np.mean(row == labels)) for row in _member_predictions(ensemble, _inputs(windows))]


def ensemble_curve(
    ensemble: EnsembleModel,
    windows: Union[Sequence[EventWindow], np.ndarray],
    labels: np.ndarray,
    sizes: Optional[Sequence[int]] = None,
) -> List[Tuple[int, float]]:
    """Accuracy of the vote of the first ``m`` members, for every ``m`` in ``sizes`` (default ``1..k``)."""
    labels = np.asarray(labels)
    predictions = _member_predictions(ensemble, _inputs(windows))
    if sizes is None:
        sizes = range(1, ensemble.k + 1)
    curve = []
    for m in sizes:
        if not 1 <= m <= ensemble.k:
            raise ValueError(f"ensemble size {m} is outside 1..{ensemble.k}")
        votes = _plurality(_tally(predictions[:m], ensemble.n_class))
        curve.append((int(m), float(np.mean(votes == labels))))
    return curve


def save_ensemble(path: Union[str, Path], ensemble: EnsembleModel) -> None:
    """Write an ensemble directory: ``manifest.yaml`` plus one model file per member."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for i, member in enumerate(ensemble.members):
        name = f"member-{i:03d}.model"
        save(member, path / name)
        names.append(name)
    manifest = {
        "k": ensemble.k,
        "master_seed": ensemble.master_seed,
        "config": ensemble.config.to_dict(),
        "seeds": [list(member_seeds(ensemble.master_seed, i)) for i in range(ensemble.k)],
        "members": names,
    }
    with open(path / MANIFEST, "w", encoding="utf-8") as fp:
        yaml.safe_dump(manifest, fp, sort_keys=True)
    l.info("Saved an ensemble of %d members to %s", ensemble.k, path)


def load_ensemble(path: Union[str, Path]) -> EnsembleModel:
    """Read an ensemble directory written by `save_ensemble`."""
    path = Path(path)
    with open(path / MANIFEST, "r", encoding="utf-8") as fp:
        manifest = yaml.safe_load(fp)
    if not isinstance(manifest, dict) or "members" not in manifest:
        raise ValueError(f"{path / MANIFEST} is not an ensemble manifest")
    members = [load(path / name) for name in manifest["members"]]
    if len(members) != manifest["k"]:
        raise ValueError(f"{path}: manifest lists {len(members)} members but k is {manifest['k']}")
    ensemble = EnsembleModel(members, manifest["master_seed"])
    if ensemble.config != ModelConfig(**manifest["config"]):
        raise ValueError(f"{path}: member config disagrees with the manifest")
    return ensemble
