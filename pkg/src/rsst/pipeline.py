"""Flow record cleaning, temporal windowing, chronological splits, CSV ingestion.

Splits are strictly time-ordered: training data always precedes validation,
which precedes test. Labels on the unlabeled training pool are stripped from
the windows themselves and kept only in a sealed side-channel used by gate
diagnostics, never by the trainer.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .schema import FeatureSchema, SchemaError, validate_record
from .tensorfile import load_tensors, save_tensors

BENIGN, MALICIOUS = 0, 1


class PipelineError(ValueError):
    """Raised for ordering violations, empty splits and malformed inputs."""


@dataclass
class FlowRecord:
    """One flow: timestamp (seconds), F feature values, optional binary label."""

    timestamp: float
    features: np.ndarray
    label: int | None = None
    stream_id: str = "s0"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)


@dataclass
class Window:
    """An F x T feature matrix over T consecutive flows of one stream."""

    matrix: np.ndarray
    start_index: int
    stream_id: str
    timestamps: np.ndarray
    label: int | None = None
    uid: str | None = None

    @property
    def id(self) -> str:
        return self.uid if self.uid is not None else f"{self.stream_id}:{self.start_index}"

    @property
    def T(self) -> int:
        return self.matrix.shape[1]


@dataclass
class CleaningReport:
    """Removal counts per rule; removed + retained must equal the input size."""

    missing: int = 0
    duplicate: int = 0
    inconsistent: int = 0
    excluded_segment: int = 0
    retained: int = 0

    @property
    def removed(self) -> int:
        return self.missing + self.duplicate + self.inconsistent + self.excluded_segment

    def to_dict(self) -> dict:
        return {
            "missing": self.missing,
            "duplicate": self.duplicate,
            "inconsistent": self.inconsistent,
            "excluded_segment": self.excluded_segment,
            "retained": self.retained,
            "removed": self.removed,
        }


@dataclass
class SplitSet:
    """Chronological splits; unlabeled training windows carry no labels."""

    train_labeled: list[Window]
    train_unlabeled: list[Window]
    validation: list[Window]
    test: list[Window]
    label_fraction: float
    sealed_labels: dict[str, int] = field(default_factory=dict)

    def check_chronology(self) -> None:
        """Leak-freedom: max(train) < min(val) < min(test) on timestamps."""
        t_train = max(w.timestamps[-1] for w in self.train_labeled + self.train_unlabeled)
        v_lo = min(w.timestamps[0] for w in self.validation)
        s_lo = min(w.timestamps[0] for w in self.test)
        if not (t_train < v_lo < s_lo):
            raise PipelineError(
                f"chronology violated: train<= {t_train}, val>= {v_lo}, test>= {s_lo}"
            )


class StreamStore:
    """Per-stream feature matrices and timestamps; jitter context for augmentation."""

    def __init__(self):
        self._feat: dict[str, np.ndarray] = {}
        self._ts: dict[str, np.ndarray] = {}

    @classmethod
    def from_records(cls, records: Sequence[FlowRecord]) -> "StreamStore":
        store = cls()
        by_stream: dict[str, list[FlowRecord]] = {}
        for r in records:
            by_stream.setdefault(r.stream_id, []).append(r)
        for sid, recs in by_stream.items():
            store._feat[sid] = np.stack([r.features for r in recs])
            store._ts[sid] = np.array([r.timestamp for r in recs])
        return store

    def has(self, stream_id: str) -> bool:
        return stream_id in self._feat

    def length(self, stream_id: str) -> int:
        return len(self._ts[stream_id])

    def slice(self, stream_id: str, start: int, T: int) -> tuple[np.ndarray, np.ndarray]:
        """(F, T) matrix and (T,) timestamps for a window at `start`."""
        feats = self._feat[stream_id][start : start + T]
        return feats.T.copy(), self._ts[stream_id][start : start + T].copy()


# ---------------- cleaning ----------------


def clean(
    records: Sequence[FlowRecord],
    schema: FeatureSchema,
    excluded_segments: Sequence[tuple[float, float]] = (),
) -> tuple[list[FlowRecord], CleaningReport]:
    """Drop non-finite, duplicate, constraint-violating and excluded-segment records.

    Rules apply in that order; each removal is counted once under the first
    rule that fires. Identifier fields never reach FlowRecord, so no rule for
    them exists here (enforced at ingestion).
    """
    report = CleaningReport()
    survivors: list[FlowRecord] = []
    seen: set[tuple] = set()
    for r in records:
        if not np.all(np.isfinite(r.features)):
            report.missing += 1
            continue
        key = (r.stream_id, r.timestamp, r.features.tobytes())
        if key in seen:
            report.duplicate += 1
            continue
        seen.add(key)
        if validate_record(r, schema):
            report.inconsistent += 1
            continue
        if any(lo <= r.timestamp <= hi for lo, hi in excluded_segments):
            report.excluded_segment += 1
            continue
        survivors.append(r)
    report.retained = len(survivors)
    return survivors, report


# ---------------- windowing ----------------


def windowize(records: Sequence[FlowRecord], T: int, stride: int) -> list[Window]:
    """Sliding windows at starts 0, stride, 2*stride, ... over one stream.

    Window label is the OR of flow labels when all are present, absent
    otherwise. Count = floor((N - T) / stride) + 1 for N >= T.
    """
    if T < 1 or stride < 1:
        raise PipelineError("T and stride must be >= 1")
    records = list(records)
    n = len(records)
    ts = np.array([r.timestamp for r in records])
    if np.any(np.diff(ts) <= 0):
        raise PipelineError("causality violation: timestamps not strictly increasing")
    stream_ids = {r.stream_id for r in records}
    if len(stream_ids) > 1:
        raise PipelineError(f"windowize expects a single stream, got {sorted(stream_ids)}")
    if n < T:
        return []
    feats = np.stack([r.features for r in records])
    labels = [r.label for r in records]
    windows = []
    for start in range(0, n - T + 1, stride):
        chunk = labels[start : start + T]
        if any(l is None for l in chunk):
            label = None
        else:
            label = MALICIOUS if any(l == MALICIOUS for l in chunk) else BENIGN
        windows.append(
            Window(
                matrix=feats[start : start + T].T.copy(),
                start_index=start,
                stream_id=records[0].stream_id,
                timestamps=ts[start : start + T].copy(),
                label=label,
            )
        )
    return windows


def windowize_streams(records: Sequence[FlowRecord], T: int, stride: int) -> list[Window]:
    """Windowize each stream separately, concatenated in stream order."""
    by_stream: dict[str, list[FlowRecord]] = {}
    for r in records:
        by_stream.setdefault(r.stream_id, []).append(r)
    out: list[Window] = []
    for sid in sorted(by_stream):
        out.extend(windowize(by_stream[sid], T, stride))
    return out


# ---------------- chronological split ----------------


def chrono_split(
    windows: Sequence[Window],
    fractions: tuple[float, float, float],
    label_fraction: float,
    seed: int,
) -> SplitSet:
    """Split windows by timestamp quantile; keep labels on a seeded train subsample.

    Windows straddling a boundary are dropped so the chronology invariant
    holds strictly. Labels of the unlabeled remainder move into the sealed
    side-channel (ground truth for gate diagnostics only).
    """
    f_train, f_val, f_test = fractions
    if min(f_train, f_val, f_test) <= 0 or abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise PipelineError(f"fractions must be positive and sum to 1, got {fractions}")
    if not 0 < label_fraction <= 1:
        raise PipelineError(f"label fraction must be in (0, 1], got {label_fraction}")
    windows = list(windows)
    if not windows:
        raise PipelineError("no windows to split")
    end_ts = np.array([w.timestamps[-1] for w in windows])
    t1 = float(np.quantile(end_ts, f_train))
    t2 = float(np.quantile(end_ts, f_train + f_val))
    train = [w for w in windows if w.timestamps[-1] <= t1]
    val = [w for w in windows if w.timestamps[0] > t1 and w.timestamps[-1] <= t2]
    test = [w for w in windows if w.timestamps[0] > t2]
    if not train or not val or not test:
        raise PipelineError(
            f"empty split: train={len(train)} val={len(val)} test={len(test)}"
        )

    rng = np.random.default_rng(seed)
    n_lab = max(1, int(round(label_fraction * len(train))))
    lab_idx = set(rng.choice(len(train), size=n_lab, replace=False).tolist())
    train_labeled, train_unlabeled, sealed = [], [], {}
    for i, w in enumerate(train):
        if i in lab_idx:
            train_labeled.append(w)
        else:
            if w.label is not None:
                sealed[w.id] = int(w.label)
            # strip, not hide: the trainer never sees these labels
            train_unlabeled.append(
                Window(w.matrix, w.start_index, w.stream_id, w.timestamps, None, w.uid)
            )
    split = SplitSet(train_labeled, train_unlabeled, val, test, label_fraction, sealed)
    split.check_chronology()
    return split


# ---------------- CSV ingestion ----------------


@dataclass
class ColumnMap:
    """Mapping from CSV columns to schema features; unmapped columns never load."""

    timestamp: str
    features: dict[str, str]  # feature name -> csv column
    label: str | None = None
    stream: str | None = None
    label_values: dict[str, int] = field(default_factory=dict)
    label_default: int | None = MALICIOUS  # unmatched label text

    @classmethod
    def load(cls, path: str | Path) -> "ColumnMap":
        """Plain-text map: `feature.<name> = <column>`, `timestamp = <column>`,
        optional `label = ...`, `stream = ...`, `labelvalue.<text> = 0|1`."""
        ts, label, stream = None, None, None
        feats: dict[str, str] = {}
        lv: dict[str, int] = {}
        default: int | None = MALICIOUS
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise PipelineError(f"bad column-map line: {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key == "timestamp":
                ts = val
            elif key == "label":
                label = val
            elif key == "stream":
                stream = val
            elif key.startswith("feature."):
                feats[key[len("feature.") :]] = val
            elif key.startswith("labelvalue."):
                text = key[len("labelvalue.") :]
                if text == "*":
                    default = int(val)
                else:
                    lv[text] = int(val)
            else:
                raise PipelineError(f"unknown column-map key {key!r}")
        if ts is None:
            raise PipelineError("column map missing timestamp")
        return cls(ts, feats, label, stream, lv, default)


def ingest_csv(
    path: str | Path,
    column_map: ColumnMap,
    schema: FeatureSchema,
) -> tuple[list[FlowRecord], int]:
    """Read mapped columns from a CSV export; returns (records, skipped_rows).

    Only mapped columns are read, so identifier and leakage-prone fields
    (flow ids, IPs, ports, dataset flags) never enter FlowRecord. Rows are
    sorted by timestamp afterwards; duplicate timestamps within a stream are
    nudged apart by the smallest representable step to keep window columns
    strictly ordered.
    """
    missing = [n for n in schema.names if n not in column_map.features]
    if missing:
        raise PipelineError(f"column map missing features: {missing[:5]}...")
    records: list[FlowRecord] = []
    skipped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return [], 0
        header = set(reader.fieldnames)
        needed = [column_map.timestamp] + [column_map.features[n] for n in schema.names]
        if column_map.label:
            needed.append(column_map.label)
        if column_map.stream:
            needed.append(column_map.stream)
        absent = [c for c in needed if c not in header]
        if absent:
            raise PipelineError(f"mapped columns absent from CSV: {absent}")
        for row in reader:
            try:
                ts = float(row[column_map.timestamp])
                vals = np.array(
                    [float(row[column_map.features[n]]) for n in schema.names], dtype=np.float64
                )
            except (TypeError, ValueError):
                skipped += 1
                continue
            label = None
            if column_map.label:
                text = (row[column_map.label] or "").strip()
                if text in column_map.label_values:
                    label = column_map.label_values[text]
                elif text.lower() in ("benign", "normal", "0"):
                    label = BENIGN
                elif column_map.label_default is not None:
                    label = column_map.label_default
            sid = row[column_map.stream].strip() if column_map.stream else "s0"
            records.append(FlowRecord(ts, vals, label, sid))
    records.sort(key=lambda r: r.timestamp)
    _break_timestamp_ties(records)
    return records, skipped


def _break_timestamp_ties(records: list[FlowRecord]) -> None:
    last: dict[str, float] = {}
    for r in records:
        prev = last.get(r.stream_id)
        if prev is not None and r.timestamp <= prev:
            r.timestamp = float(np.nextafter(prev, np.inf))
        last[r.stream_id] = r.timestamp


# ---------------- stream CSV serialization ----------------

STREAM_VERSION = "rsst-stream v1"


def write_stream_csv(path: str | Path, records: Sequence[FlowRecord], schema: FeatureSchema) -> None:
    """Versioned CSV: stream_id,timestamp,label,f0..f{F-1}; floats via repr (round-trip exact)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {STREAM_VERSION}\n")
        cols = ["stream_id", "timestamp", "label"] + [f"f{i}" for i in range(schema.n_features)]
        fh.write(",".join(cols) + "\n")
        for r in records:
            label = "" if r.label is None else str(r.label)
            feats = ",".join(repr(float(v)) for v in r.features)
            fh.write(f"{r.stream_id},{r.timestamp!r},{label},{feats}\n")


def read_stream_csv(path: str | Path, schema: FeatureSchema) -> list[FlowRecord]:
    records: list[FlowRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith("#") or STREAM_VERSION not in first:
            raise PipelineError(f"{path}: missing stream version header")
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        expected = 3 + schema.n_features
        if len(header) != expected:
            raise PipelineError(f"{path}: expected {expected} columns, got {len(header)}")
        for row in reader:
            label = None if row[2] == "" else int(row[2])
            feats = np.array([float(v) for v in row[3:]], dtype=np.float64)
            records.append(FlowRecord(float(row[1]), feats, label, row[0]))
    return records


# ---------------- window-set serialization ----------------


def save_windows(path: str | Path, windows: Sequence[Window]) -> None:
    if not windows:
        raise PipelineError("refusing to save an empty window set")
    mats = np.stack([w.matrix for w in windows])
    tss = np.stack([w.timestamps for w in windows])
    labels = np.array([-1 if w.label is None else w.label for w in windows], dtype=np.int8)
    starts = np.array([w.start_index for w in windows], dtype=np.int64)
    meta = {
        "version": 1,
        "ids": [w.id for w in windows],
        "stream_ids": [w.stream_id for w in windows],
    }
    save_tensors(path, {"matrices": mats, "timestamps": tss, "labels": labels, "starts": starts}, meta)


def load_windows(path: str | Path) -> list[Window]:
    arrays, meta = load_tensors(path)
    out = []
    for i, (sid, uid) in enumerate(zip(meta["stream_ids"], meta["ids"])):
        label = int(arrays["labels"][i])
        start = int(arrays["starts"][i])
        w = Window(
            matrix=arrays["matrices"][i],
            start_index=start,
            stream_id=sid,
            timestamps=arrays["timestamps"][i],
            label=None if label < 0 else label,
            uid=None if uid == f"{sid}:{start}" else uid,
        )
        out.append(w)
    return out


def save_sealed_labels(path: str | Path, sealed: dict[str, int]) -> None:
    Path(path).write_text(json.dumps(sealed, sort_keys=True), encoding="utf-8")


def load_sealed_labels(path: str | Path) -> dict[str, int]:
    return {k: int(v) for k, v in json.loads(Path(path).read_text(encoding="utf-8")).items()}
