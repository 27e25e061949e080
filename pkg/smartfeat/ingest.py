"""Ingestion of daily-snapshot SMART telemetry.

The raw data is a CSV file in the Backblaze layout, one row per device per day::

    date,serial_number,model,capacity_bytes,failure,smart_1_normalized,smart_1_raw,...

`parse_snapshots` turns rows into `SnapshotRecord` objects, `assemble_histories` groups them into date-sorted
per-device `DeviceHistory` matrices with nulls replaced by zero, and `fit_normalizer` / `apply_normalizer` scale each
attribute to [0, 1] with min-max bounds learned on a training corpus.
"""
from typing import (
    Dict,
    Iterable,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    TextIO,
    Union,
)
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
import csv
import logging
import math

from dateutil.parser import isoparse
import numpy as np

from .container import dump_container, load_container

l = logging.getLogger(__name__)

__all__ = (
    "CORE_SMART_IDS",
    "DEFAULT_ATTRIBUTES",
    "REQUIRED_COLUMNS",
    "SnapshotRecord",
    "ParseReport",
    "DeviceHistory",
    "Normalizer",
    "Corpus",
    "parse_snapshots",
    "assemble_histories",
    "select_models",
    "fit_normalizer",
    "apply_normalizer",
    "dump_snapshots",
    "save_corpus",
    "load_corpus",
)

CORE_SMART_IDS = (1, 4, 5, 7, 9, 10, 12, 183, 184, 187, 188, 189, 190, 191, 192, 193, 194, 197, 198, 199, 240, 241)
DEFAULT_ATTRIBUTES = tuple(f"{i}_{flavor}" for i in CORE_SMART_IDS for flavor in ("normalized", "raw"))
REQUIRED_COLUMNS = ("date", "serial_number", "model", "capacity_bytes", "failure")


def column_name(attribute_id: str) -> str:
    """The CSV column holding ``attribute_id``, e.g. ``5_raw`` -> ``smart_5_raw``."""
    return f"smart_{attribute_id}"


@dataclass(frozen=True)
class SnapshotRecord:
    """One daily snapshot of one device."""

    date: date
    serial_number: str
    model: str
    capacity_bytes: Optional[int]
    failure: int
    attributes: Mapping[str, Optional[float]]


@dataclass
class ParseReport:
    """Counts of everything that went sideways during ingestion."""

    rows: int = 0
    skipped_rows: int = 0
    duplicates: int = 0
    absent_cells: int = 0
    missing_columns: List[str] = field(default_factory=list)
    rows_per_file: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        """Structured-text form of the report."""
        return {
            "rows": self.rows,
            "skipped_rows": self.skipped_rows,
            "duplicates": self.duplicates,
            "absent_cells": self.absent_cells,
            "missing_columns": list(self.missing_columns),
            "rows_per_file": dict(self.rows_per_file),
        }


def _parse_real(cell: str) -> Optional[float]:
    if not cell.strip():
        return None
    try:
        value = float(cell)
    except ValueError:
        return None
    if not math.isfinite(value):
        return None
    return value


def parse_snapshots(
    stream: Iterable[str], attribute_ids: Sequence[str], report: Optional[ParseReport] = None
) -> Iterator[SnapshotRecord]:
    """Parse CSV rows into `SnapshotRecord` objects, preserving row order.

    Requested attribute columns missing from the header yield absent values. Unparseable numeric cells become absent
    values. Rows whose date, serial or failure flag can't be parsed are skipped and counted in ``report``.

    :raises ValueError: if the header is missing or lacks one of `REQUIRED_COLUMNS`.
    """
    if report is None:
        report = ParseReport()
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        raise ValueError("Malformed header: the CSV stream is empty")
    header = [name.strip() for name in header]
    positions = {name: i for i, name in enumerate(header)}
    for name in REQUIRED_COLUMNS:
        if name not in positions:
            raise ValueError(f"Malformed header: missing required column {name}")

    attribute_positions: Dict[str, Optional[int]] = {}
    for attribute in attribute_ids:
        attribute_positions[attribute] = positions.get(column_name(attribute))
        if attribute_positions[attribute] is None:
            report.missing_columns.append(column_name(attribute))
    if report.missing_columns:
        l.warning("%d requested attribute columns are absent from the header", len(report.missing_columns))

    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        report.rows += 1
        if len(row) != len(header):
            l.debug("Skipping line %d: %d cells, header has %d", lineno, len(row), len(header))
            report.skipped_rows += 1
            continue
        try:
            day = isoparse(row[positions["date"]].strip()).date()
            failure = int(row[positions["failure"]].strip())
            if failure not in (0, 1):
                raise ValueError(f"failure flag {failure}")
        except ValueError as e:
            l.debug("Skipping line %d: %s", lineno, e)
            report.skipped_rows += 1
            continue
        serial = row[positions["serial_number"]].strip()
        if not serial:
            l.debug("Skipping line %d: empty serial number", lineno)
            report.skipped_rows += 1
            continue

        capacity = _parse_real(row[positions["capacity_bytes"]])
        attributes: Dict[str, Optional[float]] = {}
        for attribute, pos in attribute_positions.items():
            value = None if pos is None else _parse_real(row[pos])
            if value is None:
                report.absent_cells += 1
            attributes[attribute] = value

        yield SnapshotRecord(
            date=day,
            serial_number=serial,
            model=row[positions["model"]].strip(),
            capacity_bytes=None if capacity is None else int(capacity),
            failure=failure,
            attributes=attributes,
        )

    if report.skipped_rows:
        l.warning("Skipped %d of %d rows", report.skipped_rows, report.rows)


@dataclass
class DeviceHistory:
    """One device's date-sorted event matrix.

    ``values`` is ``len(dates) x F`` with no missing entries. If the device failed, the failure snapshot is the final
    row.
    """

    serial_number: str
    model: str
    dates: np.ndarray
    values: np.ndarray
    failed: bool

    @property
    def failure_index(self) -> Optional[int]:
        """Row index of the failure snapshot, if the device failed."""
        return len(self.dates) - 1 if self.failed else None

    @property
    def lifetime(self) -> int:
        """Days spanned from the first to the last observation, inclusive."""
        if len(self.dates) == 0:
            return 0
        return int((self.dates[-1] - self.dates[0]).astype(int)) + 1

    def __len__(self) -> int:
        return len(self.dates)


def assemble_histories(
    records: Iterable[SnapshotRecord], attribute_ids: Sequence[str], report: Optional[ParseReport] = None
) -> List[DeviceHistory]:
    """Group records by serial number into date-sorted histories.

    Absent values become 0.0. Duplicate (serial, date) pairs keep the last occurrence. A device is failed iff any of its
    records carries the failure flag; rows after the first failure snapshot are dropped. Histories are returned sorted
    by serial number, so the result doesn't depend on input row order.
    """
    if report is None:
        report = ParseReport()
    by_serial: Dict[str, Dict[date, SnapshotRecord]] = {}
    for record in records:
        days = by_serial.setdefault(record.serial_number, {})
        if record.date in days:
            report.duplicates += 1
        days[record.date] = record
    if report.duplicates:
        l.warning("Replaced %d duplicate (serial, date) snapshots", report.duplicates)

    histories = []
    for serial in sorted(by_serial):
        snapshots = [by_serial[serial][day] for day in sorted(by_serial[serial])]
        failed = False
        for i, snapshot in enumerate(snapshots):
            if snapshot.failure:
                failed = True
                if i + 1 < len(snapshots):
                    l.debug("Dropping %d snapshots of %s after its failure", len(snapshots) - i - 1, serial)
                snapshots = snapshots[: i + 1]
                break

        values = np.zeros((len(snapshots), len(attribute_ids)), dtype=np.float64)
        for row, snapshot in enumerate(snapshots):
            for col, attribute in enumerate(attribute_ids):
                value = snapshot.attributes.get(attribute)
                if value is not None:
                    values[row, col] = value
        histories.append(
            DeviceHistory(
                serial_number=serial,
                model=snapshots[-1].model,
                dates=np.array([s.date for s in snapshots], dtype="datetime64[D]"),
                values=values,
                failed=failed,
            )
        )
    l.info("Assembled %d histories (%d failed)", len(histories), sum(h.failed for h in histories))
    return histories


def select_models(histories: Iterable[DeviceHistory], models: Optional[Iterable[str]]) -> List[DeviceHistory]:
    """Restrict a corpus to the given model tags. None means keep everything."""
    if models is None:
        return list(histories)
    wanted = set(models)
    return [h for h in histories if h.model in wanted]


@dataclass
class Normalizer:
    """Per-attribute min-max bounds fitted on a training corpus."""

    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        if self.minimum.shape != self.maximum.shape or self.minimum.ndim != 1:
            raise ValueError("Normalizer bounds must be two vectors of equal length")
        if np.any(self.minimum > self.maximum):
            raise ValueError("Normalizer minimum exceeds maximum")

    @property
    def n_attributes(self) -> int:
        """How many attribute columns this normalizer was fitted on."""
        return len(self.minimum)

    @property
    def degenerate(self) -> np.ndarray:
        """Mask of constant columns, which normalize to 0.0 everywhere."""
        return self.maximum == self.minimum

    def apply(self, matrix: np.ndarray) -> np.ndarray:
        """See `apply_normalizer`."""
        return apply_normalizer(self, matrix)

    def to_dict(self) -> Dict[str, List[float]]:
        """YAML-able form; floats round-trip exactly."""
        return {"minimum": [float(x) for x in self.minimum], "maximum": [float(x) for x in self.maximum]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Sequence[float]]) -> "Normalizer":
        """Inverse of `to_dict`."""
        return cls(np.array(data["minimum"], dtype=np.float64), np.array(data["maximum"], dtype=np.float64))


def fit_normalizer(items: Iterable[Union[DeviceHistory, np.ndarray]]) -> Normalizer:
    """Fit per-attribute min/max bounds over all rows of the supplied histories (or bare event matrices).

    :raises ValueError: if nothing was supplied or the column counts disagree.
    """
    matrices = [item.values if isinstance(item, DeviceHistory) else np.asarray(item) for item in items]
    matrices = [m for m in matrices if len(m)]
    if not matrices:
        raise ValueError("Cannot fit a normalizer on an empty corpus")
    widths = {m.shape[1] for m in matrices}
    if len(widths) != 1:
        raise ValueError(f"Inconsistent attribute counts in corpus: {sorted(widths)}")
    minimum = np.min([m.min(axis=0) for m in matrices], axis=0)
    maximum = np.max([m.max(axis=0) for m in matrices], axis=0)
    result = Normalizer(minimum, maximum)
    if result.degenerate.any():
        l.warning("%d attributes are constant over the training corpus", int(result.degenerate.sum()))
    return result


def apply_normalizer(normalizer: Normalizer, matrix: np.ndarray) -> np.ndarray:
    """Scale each column to ``clip((x - min) / (max - min), 0, 1)``; degenerate columns map to 0.0.

    :raises ValueError: if the column count doesn't match the fitted attribute count.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != normalizer.n_attributes:
        raise ValueError(
            f"attributes: normalizer was fitted on {normalizer.n_attributes} attributes, "
            f"matrix has shape {matrix.shape}"
        )
    span = normalizer.maximum - normalizer.minimum
    degenerate = span == 0
    safe_span = np.where(degenerate, 1.0, span)
    out = np.clip((matrix - normalizer.minimum) / safe_span, 0.0, 1.0)
    out[:, degenerate] = 0.0
    return out


def dump_snapshots(histories: Iterable[DeviceHistory], attribute_ids: Sequence[str], stream: TextIO) -> None:
    """Write histories back out in the daily-snapshot CSV layout, one row per device per day."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(list(REQUIRED_COLUMNS) + [column_name(a) for a in attribute_ids])
    for history in histories:
        for row, day in enumerate(history.dates):
            failure = int(history.failed and row == len(history) - 1)
            writer.writerow(
                [str(day), history.serial_number, history.model, "", failure]
                + [repr(float(x)) for x in history.values[row]]
            )


@dataclass
class Corpus:
    """A set of histories sharing one attribute layout, plus whatever report produced them."""

    attribute_ids: List[str]
    histories: List[DeviceHistory]
    report: Dict[str, object] = field(default_factory=dict)

    def by_serial(self, serial: str) -> DeviceHistory:
        """Look up one device."""
        for history in self.histories:
            if history.serial_number == serial:
                return history
        raise KeyError(f"serial: no device {serial} in corpus")


def save_corpus(path: Union[str, Path], corpus: Corpus) -> None:
    """Write a corpus container."""
    histories = corpus.histories
    width = len(corpus.attribute_ids)
    meta = {
        "attribute_ids": list(corpus.attribute_ids),
        "serials": [h.serial_number for h in histories],
        "models": [h.model for h in histories],
        "report": corpus.report,
    }
    arrays = {
        "lengths": np.array([len(h) for h in histories], dtype=np.int64),
        "failed": np.array([h.failed for h in histories], dtype=np.bool_),
        "dates": np.concatenate([h.dates for h in histories]) if histories else np.zeros(0, dtype="datetime64[D]"),
        "values": np.concatenate([h.values for h in histories]) if histories else np.zeros((0, width)),
    }
    dump_container(path, b"CORP", meta, arrays)
    l.info("Saved %d histories to %s", len(histories), path)


def load_corpus(path: Union[str, Path]) -> Corpus:
    """Read a corpus container written by `save_corpus`."""
    meta, arrays = load_container(path, b"CORP")
    bounds = np.concatenate([[0], np.cumsum(arrays["lengths"])])
    histories = []
    for i, serial in enumerate(meta["serials"]):
        lo, hi = bounds[i], bounds[i + 1]
        histories.append(
            DeviceHistory(
                serial_number=serial,
                model=meta["models"][i],
                dates=arrays["dates"][lo:hi].astype("datetime64[D]"),
                values=arrays["values"][lo:hi].reshape(hi - lo, len(meta["attribute_ids"])),
                failed=bool(arrays["failed"][i]),
            )
        )
    l.info("Loaded %d histories from %s", len(histories), path)
    return Corpus(list(meta["attribute_ids"]), histories, dict(meta.get("report") or {}))
