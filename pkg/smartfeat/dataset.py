"""Turning device histories into fixed-length labeled windows.

A window is the most recent ``window_length`` rows of a history after the last ``horizon`` rows have been dropped, so a
classifier trained on it predicts failure ``horizon`` days ahead. Windows are balanced by subsampling normal devices,
split into train and test sides by serial number, and finally featurized into channel stacks.
"""
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union
from dataclasses import dataclass, field, replace
from pathlib import Path
import logging

import numpy as np

from .container import dump_container, load_container
from .featurize import (
    EDGE_KERNEL,
    CusumParams,
    FeatureId,
    FeatureStack,
    build_feature_stack,
)
from .ingest import DeviceHistory, Normalizer, apply_normalizer

l = logging.getLogger(__name__)

__all__ = (
    "MIN_WINDOW_LENGTH",
    "WindowSpec",
    "EventWindow",
    "WindowReport",
    "Preprocessing",
    "Dataset",
    "slice_window",
    "slice_windows",
    "balance_sample",
    "split",
    "featurize_windows",
    "stack_arrays",
    "suggest_window_length",
    "save_dataset",
    "load_dataset",
)

MIN_WINDOW_LENGTH = 5


@dataclass(frozen=True)
class WindowSpec:
    """How windows are cut from a history.

    :param window_length: T, days per window.
    :param horizon: n, the number of most recent days dropped before cutting.
    :param turn_on_cutoff: devices with a shorter lifetime in days are excluded as turn-on failures.
    """

    window_length: int = 30
    horizon: int = 0
    turn_on_cutoff: int = 30

    def __post_init__(self):
        if self.window_length < MIN_WINDOW_LENGTH:
            raise ValueError(f"window.window_length must be at least {MIN_WINDOW_LENGTH}, got {self.window_length}")
        if self.horizon < 0:
            raise ValueError(f"window.horizon must be non-negative, got {self.horizon}")
        if self.turn_on_cutoff < 0:
            raise ValueError(f"window.turn_on_cutoff must be non-negative, got {self.turn_on_cutoff}")

    def to_dict(self) -> Dict[str, int]:
        return {"window_length": self.window_length, "horizon": self.horizon, "turn_on_cutoff": self.turn_on_cutoff}


@dataclass
class EventWindow:
    """One labeled instance. ``matrix`` is the raw ``T x F`` slice; ``stack`` is filled in by `featurize_windows`."""

    serial: str
    label: int
    matrix: np.ndarray
    stack: Optional[FeatureStack] = None


@dataclass
class WindowReport:
    """Counts of devices kept and skipped while slicing."""

    sliced: int = 0
    insufficient_history: int = 0
    turn_on: int = 0

    def to_dict(self) -> Dict[str, int]:
        return {"sliced": self.sliced, "insufficient_history": self.insufficient_history, "turn_on": self.turn_on}


def slice_window(
    history: DeviceHistory, spec: WindowSpec, report: Optional[WindowReport] = None
) -> Optional[EventWindow]:
    """Cut the window ending ``spec.horizon`` rows before the end of ``history``, or return None to skip the device.

    The same anchoring applies to failed and normal devices. A device is skipped if it has fewer than ``window_length +
    horizon`` rows or a lifetime shorter than ``turn_on_cutoff`` days.
    """
    if report is None:
        report = WindowReport()
    total = len(history)
    if history.lifetime < spec.turn_on_cutoff:
        report.turn_on += 1
        return None
    if total < spec.window_length + spec.horizon:
        report.insufficient_history += 1
        return None
    last_usable = total - 1 - spec.horizon
    first = last_usable - spec.window_length + 1
    report.sliced += 1
    return EventWindow(
        serial=history.serial_number,
        label=int(history.failed),
        matrix=history.values[first : last_usable + 1].copy(),
    )


def slice_windows(histories: Iterable[DeviceHistory], spec: WindowSpec) -> Tuple[List[EventWindow], WindowReport]:
    """`slice_window` over a whole corpus."""
    report = WindowReport()
    windows = []
    for history in histories:
        window = slice_window(history, spec, report)
        if window is not None:
            windows.append(window)
    if report.insufficient_history or report.turn_on:
        l.info(
            "Sliced %d windows; skipped %d devices with short histories and %d turn-on failures",
            report.sliced,
            report.insufficient_history,
            report.turn_on,
        )
    return windows, report


def balance_sample(windows: Sequence[EventWindow], seed: int) -> List[EventWindow]:
    """Keep every failed window and a seeded uniform subset of normal windows of the same size.

    Input order is preserved in the output.

    :raises ValueError: if there are no failed windows, or fewer normal windows than failed ones.
    """
    failed = [i for i, w in enumerate(windows) if w.label == 1]
    normal = [i for i, w in enumerate(windows) if w.label != 1]
    if not failed:
        raise ValueError("Cannot balance a sample without failed windows")
    if len(normal) < len(failed):
        raise ValueError(f"Cannot balance {len(failed)} failed windows with only {len(normal)} normal windows")
    rng = np.random.default_rng(seed)
    chosen = set(np.asarray(normal)[rng.choice(len(normal), size=len(failed), replace=False)].tolist())
    keep = set(failed) | chosen
    return [w for i, w in enumerate(windows) if i in keep]


def split(
    windows: Sequence[EventWindow], test_fraction: float, seed: int
) -> Tuple[List[EventWindow], List[EventWindow]]:
    """Split windows into a train and a test side, stratified by label and grouped by serial number.

    Per class, ``round(n * test_fraction)`` serials (half rounded up, at least one, at most ``n - 1``) go to the test
    side. Both sides keep the input order.

    :raises ValueError: if ``test_fraction`` is outside (0, 1), a class has fewer than two serials, or a serial carries
        both labels.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"evaluate.test_fraction must be strictly between 0 and 1, got {test_fraction}")

    serial_labels: Dict[str, int] = {}
    for window in windows:
        if serial_labels.setdefault(window.serial, window.label) != window.label:
            raise ValueError(f"serial: {window.serial} has windows with both labels")

    rng = np.random.default_rng(seed)
    test_serials = set()
    for label in sorted(set(serial_labels.values())):
        serials = sorted(s for s, lab in serial_labels.items() if lab == label)
        if len(serials) < 2:
            raise ValueError(f"Cannot split class {label}: it has {len(serials)} devices, need at least 2")
        n_test = int(np.floor(len(serials) * test_fraction + 0.5))
        n_test = min(max(n_test, 1), len(serials) - 1)
        order = rng.permutation(len(serials))
        test_serials.update(serials[i] for i in order[:n_test])

    train = [w for w in windows if w.serial not in test_serials]
    test = [w for w in windows if w.serial in test_serials]
    return train, test


def featurize_windows(
    windows: Iterable[EventWindow],
    normalizer: Normalizer,
    enabled: Iterable[FeatureId],
    cusum_params: Optional[CusumParams] = None,
    edge_kernel: Sequence[float] = EDGE_KERNEL,
) -> List[EventWindow]:
    """Normalize each window and build its feature stack. The inputs are not modified."""
    enabled = frozenset(enabled)
    return [
        replace(
            window,
            stack=build_feature_stack(apply_normalizer(normalizer, window.matrix), enabled, cusum_params, edge_kernel),
        )
        for window in windows
    ]


def stack_arrays(windows: Sequence[EventWindow]) -> Tuple[np.ndarray, np.ndarray]:
    """Collect featurized windows into the network's input tensor ``N x C x T`` and label vector ``N``."""
    if not windows:
        raise ValueError("Cannot stack an empty set of windows")
    inputs = []
    for window in windows:
        if window.stack is None:
            raise ValueError(f"Window of {window.serial} has not been featurized")
        inputs.append(window.stack.flatten())
    shapes = {x.shape for x in inputs}
    if len(shapes) != 1:
        raise ValueError(f"Windows have inconsistent stacked shapes: {sorted(shapes)}")
    return np.stack(inputs), np.array([w.label for w in windows], dtype=np.int64)


def suggest_window_length(lead_days: int, horizon: int = 0) -> int:
    """A window length that can hold a critical pattern appearing ``lead_days`` before failure.

    The window should span about twice the pattern's lead time and must be longer than the horizon.
    """
    if lead_days < 0 or horizon < 0:
        raise ValueError(f"lead_days and horizon must be non-negative, got {lead_days} and {horizon}")
    return max(2 * lead_days, horizon + 1, MIN_WINDOW_LENGTH)


@dataclass(frozen=True)
class Preprocessing:
    """How raw windows become network inputs. Stored with datasets and with every trained model."""

    spec: WindowSpec
    attribute_ids: Tuple[str, ...]
    normalizer: Normalizer
    features: FrozenSet[FeatureId] = frozenset()
    cusum_params: CusumParams = field(default_factory=CusumParams)
    edge_kernel: Tuple[float, ...] = EDGE_KERNEL

    @property
    def n_channels(self) -> int:
        """Input channels of the network: stacked features times attributes."""
        return (len(self.features - {FeatureId.Original}) + 1) * len(self.attribute_ids)

    def prepare(self, windows: Iterable[EventWindow]) -> List[EventWindow]:
        """`featurize_windows` with the stored settings."""
        return featurize_windows(windows, self.normalizer, self.features, self.cusum_params, self.edge_kernel)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "window": self.spec.to_dict(),
            "attribute_ids": list(self.attribute_ids),
            "normalizer": self.normalizer.to_dict(),
            "features": [f.slug for f in FeatureId if f in self.features],
            "cusum": {"init_period": self.cusum_params.init_period, "slack": float(self.cusum_params.slack)},
            "edge_kernel": [float(x) for x in self.edge_kernel],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Preprocessing":
        return cls(
            spec=WindowSpec(**data["window"]),
            attribute_ids=tuple(data["attribute_ids"]),
            normalizer=Normalizer.from_dict(data["normalizer"]),
            features=frozenset(FeatureId.from_slug(s) for s in data["features"]),
            cusum_params=CusumParams(init_period=data["cusum"]["init_period"], slack=data["cusum"]["slack"]),
            edge_kernel=tuple(data["edge_kernel"]),
        )


@dataclass
class Dataset:
    """Featurized windows together with the preprocessing that produced them."""

    preprocessing: Preprocessing
    windows: List[EventWindow]
    report: Dict[str, Any] = field(default_factory=dict)


def save_dataset(path: Union[str, Path], dataset: Dataset) -> None:
    """Write a dataset container."""
    windows = dataset.windows
    prep = dataset.preprocessing
    meta = {
        "preprocessing": prep.to_dict(),
        "serials": [w.serial for w in windows],
        "report": dataset.report,
    }
    shape = (0, prep.spec.window_length, len(prep.attribute_ids))
    arrays = {
        "labels": np.array([w.label for w in windows], dtype=np.int64),
        "matrices": np.stack([w.matrix for w in windows]) if windows else np.zeros(shape),
    }
    stacks = [w.stack for w in windows]
    if windows and all(s is not None for s in stacks):
        arrays["stacks"] = np.stack([s.matrices for s in stacks])  # type: ignore[union-attr]
        meta["stack_features"] = [f.slug for f in stacks[0].features]  # type: ignore[union-attr]
    dump_container(path, b"DSET", meta, arrays)
    l.info("Saved %d windows to %s", len(windows), path)


def load_dataset(path: Union[str, Path]) -> Dataset:
    """Read a dataset container written by `save_dataset`."""
    meta, arrays = load_container(path, b"DSET")
    stack_features = tuple(FeatureId.from_slug(s) for s in meta.get("stack_features", []))
    windows = []
    for i, serial in enumerate(meta["serials"]):
        stack = FeatureStack(stack_features, arrays["stacks"][i]) if "stacks" in arrays else None
        windows.append(EventWindow(serial, int(arrays["labels"][i]), arrays["matrices"][i], stack))
    l.info("Loaded %d windows from %s", len(windows), path)
    return Dataset(Preprocessing.from_dict(meta["preprocessing"]), windows, dict(meta.get("report") or {}))
