"""Flow feature space: per-feature bounds, cross-feature constraints, projection.

The schema is the validity oracle for every other component: cleaning drops
records that fail it, augmentation rejects views that fail it, and attack
generators project their outputs back onto it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

STD_FLOOR = 1e-8

CORE = "core-counter"
DERIVED = "derived"


class SchemaError(ValueError):
    """Raised for malformed schemas or schema/record arity mismatches."""


@dataclass(frozen=True)
class FeatureSpec:
    """One flow feature: name, kind (core-counter features are never maskable), bounds."""

    name: str
    kind: str
    lower: float
    upper: float = math.inf
    unit: str = ""

    def __post_init__(self):
        if self.kind not in (CORE, DERIVED):
            raise SchemaError(f"unknown feature kind {self.kind!r} for {self.name!r}")
        if not self.lower <= self.upper:
            raise SchemaError(f"feature {self.name!r}: lower {self.lower} > upper {self.upper}")


@dataclass(frozen=True)
class CrossConstraint:
    """Cross-feature rule: geq(a, b) means value(a) >= value(b); nonneg(a) means value(a) >= 0."""

    kind: str
    a: str
    b: str = ""

    def __post_init__(self):
        if self.kind not in ("geq", "nonneg"):
            raise SchemaError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "geq" and not self.b:
            raise SchemaError("geq constraint needs two feature names")


class FeatureSchema:
    """Ordered feature list plus cross-feature constraints."""

    def __init__(self, features: Sequence[FeatureSpec], constraints: Sequence[CrossConstraint] = ()):
        names = [f.name for f in features]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names")
        self.features = tuple(features)
        self.constraints = tuple(constraints)
        self.names = tuple(names)
        self.index = {n: i for i, n in enumerate(names)}
        for c in self.constraints:
            for n in (c.a, c.b) if c.kind == "geq" else (c.a,):
                if n not in self.index:
                    raise SchemaError(f"constraint references unknown feature {n!r}")
            if c.kind == "geq":
                ua = self.features[self.index[c.a]].upper
                ub = self.features[self.index[c.b]].upper
                # Repair raises the lesser member; that stays in-bounds only if
                # a's ceiling dominates b's.
                if ua < ub:
                    raise SchemaError(f"geq({c.a},{c.b}): upper({c.a}) < upper({c.b})")
        self.lower = np.array([f.lower for f in self.features], dtype=np.float64)
        self.upper = np.array([f.upper for f in self.features], dtype=np.float64)
        self._geq_pairs = np.array(
            [(self.index[c.a], self.index[c.b]) for c in self.constraints if c.kind == "geq"],
            dtype=np.intp,
        ).reshape(-1, 2)
        self._nonneg_idx = np.array(
            [self.index[c.a] for c in self.constraints if c.kind == "nonneg"], dtype=np.intp
        )

    @property
    def n_features(self) -> int:
        return len(self.features)

    def maskable_names(self) -> tuple[str, ...]:
        """Derived features only; core counters are never maskable."""
        return tuple(f.name for f in self.features if f.kind == DERIVED)

    def core_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features if f.kind == CORE)

    # ---------------- serialization ----------------

    def to_text(self) -> str:
        lines = ["# feature: name,kind,lower,upper,unit"]
        for f in self.features:
            upper = "inf" if math.isinf(f.upper) else f"{f.upper:g}"
            lines.append(f"{f.name},{f.kind},{f.lower:g},{upper},{f.unit}")
        for c in self.constraints:
            lines.append(f"geq,{c.a},{c.b}" if c.kind == "geq" else f"nonneg,{c.a}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FeatureSchema":
        feats: list[FeatureSpec] = []
        cons: list[CrossConstraint] = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if parts[0] == "geq":
                if len(parts) != 3:
                    raise SchemaError(f"bad constraint line: {raw!r}")
                cons.append(CrossConstraint("geq", parts[1], parts[2]))
            elif parts[0] == "nonneg":
                if len(parts) != 2:
                    raise SchemaError(f"bad constraint line: {raw!r}")
                cons.append(CrossConstraint("nonneg", parts[1]))
            else:
                if len(parts) != 5:
                    raise SchemaError(f"bad feature line: {raw!r}")
                name, kind, lo, hi, unit = parts
                feats.append(FeatureSpec(name, kind, float(lo), float(hi), unit))
        return cls(feats, cons)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass
class Normalizer:
    """Per-feature mean/std fitted on one split; std floored, strictly positive."""

    mean: np.ndarray
    std: np.ndarray
    fitted_on: str

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise SchemaError("normalizer std must be strictly positive")

    def require_train_fit(self) -> None:
        """Leak guard: training and scoring only accept train-split statistics."""
        if self.fitted_on != "train":
            raise SchemaError(f"normalizer fitted on {self.fitted_on!r}, expected 'train'")

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Z-score a (F,) vector, (F, T) window or (N, F, T) stack."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return (x - self.mean) / self.std
        if x.ndim == 2:
            return (x - self.mean[:, None]) / self.std[:, None]
        return (x - self.mean[None, :, None]) / self.std[None, :, None]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "fitted_on": self.fitted_on}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["mean"]), np.array(d["std"]), d["fitted_on"])


# ---------------- operations ----------------


def _values_of(record, schema: FeatureSchema) -> np.ndarray:
    vals = np.asarray(getattr(record, "features", record), dtype=np.float64)
    if vals.shape != (schema.n_features,):
        raise SchemaError(f"schema arity: expected {schema.n_features} values, got {vals.shape}")
    return vals


def validate_record(record, schema: FeatureSchema) -> list[str]:
    """Return every violated bound or cross-constraint by name; valid iff empty."""
    vals = _values_of(record, schema)
    violations: list[str] = []
    for i, f in enumerate(schema.features):
        v = vals[i]
        if not math.isfinite(v):
            violations.append(f"{f.name} finite")
            continue
        if v < f.lower:
            violations.append(f"{f.name} ≥ {f.lower:g}")
        elif v > f.upper:
            violations.append(f"{f.name} ≤ {f.upper:g}")
    for c in schema.constraints:
        if c.kind == "nonneg":
            if math.isfinite(vals[schema.index[c.a]]) and vals[schema.index[c.a]] < 0:
                violations.append(f"{c.a} ≥ 0")
        else:
            va, vb = vals[schema.index[c.a]], vals[schema.index[c.b]]
            if math.isfinite(va) and math.isfinite(vb) and va < vb:
                violations.append(f"{c.a} ≥ {c.b}")
    return violations


def validate_window(matrix: np.ndarray, schema: FeatureSchema) -> bool:
    """Fast all-columns check of an (F, T) window; True iff every column is valid."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != schema.n_features:
        raise SchemaError(f"schema arity: expected ({schema.n_features}, T) matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        return False
    if np.any(m < schema.lower[:, None]) or np.any(m > schema.upper[:, None]):
        return False
    if schema._nonneg_idx.size and np.any(m[schema._nonneg_idx] < 0):
        return False
    if schema._geq_pairs.size:
        a, b = schema._geq_pairs[:, 0], schema._geq_pairs[:, 1]
        if np.any(m[a] < m[b]):
            return False
    return True


def project_to_valid(x: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Clip into bounds, then repair cross-constraints by raising the lesser member."""
    out = project_many(np.asarray(x, dtype=np.float64)[None, :], schema)
    return out[0]


def project_many(x: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Vectorized projection of an (N, F) batch onto the valid feature region."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != schema.n_features:
        raise SchemaError(f"schema arity: expected (N, {schema.n_features}), got {m.shape}")
    out = np.clip(m, schema.lower, schema.upper)
    if schema._nonneg_idx.size:
        idx = schema._nonneg_idx
        out[:, idx] = np.maximum(out[:, idx], 0.0)
    # Chained geq pairs can re-violate earlier ones; repairs only raise values,
    # so iterating passes converges within len(constraints) sweeps.
    pairs = schema._geq_pairs
    if pairs.size:
        for _ in range(len(pairs) + 1):
            a, b = pairs[:, 0], pairs[:, 1]
            deficit = out[:, b] - out[:, a]
            if np.all(deficit <= 0):
                break
            for ia, ib in pairs:
                np.maximum(out[:, ia], out[:, ib], out=out[:, ia])
    return out


def fit_normalizer(records, schema: FeatureSchema, fitted_on: str = "train") -> Normalizer:
    """Per-feature mean and population std over a record list or an (N, F) matrix."""
    if hasattr(records, "ndim"):
        mat = np.asarray(records, dtype=np.float64)
    else:
        records = list(records)
        if not records:
            raise SchemaError("cannot fit normalizer on empty input")
        mat = np.stack([_values_of(r, schema) for r in records])
    if mat.size == 0:
        raise SchemaError("cannot fit normalizer on empty input")
    mean = mat.mean(axis=0)
    std = np.maximum(mat.std(axis=0), STD_FLOOR)  # population variance, floored
    return Normalizer(mean, std, fitted_on)


# ---------------- default 78-feature schema ----------------

_UNBOUNDED = math.inf

# (name, core?, lower, upper, unit), grouped by CICFlowMeter-style categories.
_DEFAULT_TABLE: list[tuple[str, bool, float, float, str]] = [
    # durations and raw counters
    ("flow_duration", True, 0.0, _UNBOUNDED, "s"),
    ("total_fwd_packets", True, 1.0, _UNBOUNDED, "packets"),
    ("total_bwd_packets", True, 0.0, _UNBOUNDED, "packets"),
    ("total_fwd_bytes", True, 0.0, _UNBOUNDED, "bytes"),
    ("total_bwd_bytes", True, 0.0, _UNBOUNDED, "bytes"),
    ("fwd_header_bytes", True, 0.0, _UNBOUNDED, "bytes"),
    ("bwd_header_bytes", True, 0.0, _UNBOUNDED, "bytes"),
    ("subflow_fwd_packets", True, 0.0, _UNBOUNDED, "packets"),
    ("subflow_fwd_bytes", True, 0.0, _UNBOUNDED, "bytes"),
    ("subflow_bwd_packets", True, 0.0, _UNBOUNDED, "packets"),
    ("subflow_bwd_bytes", True, 0.0, _UNBOUNDED, "bytes"),
    ("init_win_bytes_fwd", True, 0.0, _UNBOUNDED, "bytes"),
    ("init_win_bytes_bwd", True, 0.0, _UNBOUNDED, "bytes"),
    ("fwd_psh_flags", True, 0.0, _UNBOUNDED, "count"),
    ("bwd_psh_flags", True, 0.0, _UNBOUNDED, "count"),
    ("fwd_urg_flags", True, 0.0, _UNBOUNDED, "count"),
    ("bwd_urg_flags", True, 0.0, _UNBOUNDED, "count"),
    ("fin_flag_count", True, 0.0, _UNBOUNDED, "count"),
    ("syn_flag_count", True, 0.0, _UNBOUNDED, "count"),
    ("rst_flag_count", True, 0.0, _UNBOUNDED, "count"),
    ("ack_flag_count", True, 0.0, _UNBOUNDED, "count"),
    ("act_data_pkt_fwd", True, 0.0, _UNBOUNDED, "packets"),
    # packet length statistics
    ("fwd_pkt_len_max", False, 0.0, _UNBOUNDED, "bytes"),
    ("fwd_pkt_len_min", False, 0.0, _UNBOUNDED, "bytes"),
    ("fwd_pkt_len_mean", False, 0.0, _UNBOUNDED, "bytes"),
    ("fwd_pkt_len_std", False, 0.0, _UNBOUNDED, "bytes"),
    ("bwd_pkt_len_max", False, 0.0, _UNBOUNDED, "bytes"),
    ("bwd_pkt_len_min", False, 0.0, _UNBOUNDED, "bytes"),
    ("bwd_pkt_len_mean", False, 0.0, _UNBOUNDED, "bytes"),
    ("bwd_pkt_len_std", False, 0.0, _UNBOUNDED, "bytes"),
    ("pkt_len_max", False, 0.0, _UNBOUNDED, "bytes"),
    ("pkt_len_min", False, 0.0, _UNBOUNDED, "bytes"),
    ("pkt_len_mean", False, 0.0, _UNBOUNDED, "bytes"),
    ("pkt_len_std", False, 0.0, _UNBOUNDED, "bytes"),
    ("pkt_len_var", False, 0.0, _UNBOUNDED, "bytes2"),
    # inter-arrival time statistics
    ("flow_iat_total", False, 0.0, _UNBOUNDED, "s"),
    ("flow_iat_mean", False, 0.0, _UNBOUNDED, "s"),
    ("flow_iat_std", False, 0.0, _UNBOUNDED, "s"),
    ("flow_iat_max", False, 0.0, _UNBOUNDED, "s"),
    ("flow_iat_min", False, 0.0, _UNBOUNDED, "s"),
    ("fwd_iat_total", False, 0.0, _UNBOUNDED, "s"),
    ("fwd_iat_mean", False, 0.0, _UNBOUNDED, "s"),
    ("fwd_iat_std", False, 0.0, _UNBOUNDED, "s"),
    ("fwd_iat_max", False, 0.0, _UNBOUNDED, "s"),
    ("fwd_iat_min", False, 0.0, _UNBOUNDED, "s"),
    ("bwd_iat_total", False, 0.0, _UNBOUNDED, "s"),
    ("bwd_iat_mean", False, 0.0, _UNBOUNDED, "s"),
    ("bwd_iat_std", False, 0.0, _UNBOUNDED, "s"),
    ("bwd_iat_max", False, 0.0, _UNBOUNDED, "s"),
    ("bwd_iat_min", False, 0.0, _UNBOUNDED, "s"),
    # rates and ratios
    ("flow_bytes_per_s", False, 0.0, _UNBOUNDED, "bytes/s"),
    ("flow_pkts_per_s", False, 0.0, _UNBOUNDED, "packets/s"),
    ("fwd_pkts_per_s", False, 0.0, _UNBOUNDED, "packets/s"),
    ("bwd_pkts_per_s", False, 0.0, _UNBOUNDED, "packets/s"),
    ("down_up_ratio", False, 0.0, _UNBOUNDED, "ratio"),
    ("pkt_down_up_ratio", False, 0.0, _UNBOUNDED, "ratio"),
    ("avg_packet_size", False, 0.0, _UNBOUNDED, "bytes"),
    ("fwd_seg_size_avg", False, 0.0, _UNBOUNDED, "bytes"),
    ("bwd_seg_size_avg", False, 0.0, _UNBOUNDED, "bytes"),
    ("min_seg_size_fwd", False, 0.0, _UNBOUNDED, "bytes"),
    # bulk transfer statistics
    ("fwd_bytes_bulk_avg", False, 0.0, _UNBOUNDED, "bytes"),
    ("fwd_pkts_bulk_avg", False, 0.0, _UNBOUNDED, "packets"),
    ("fwd_bulk_rate_avg", False, 0.0, _UNBOUNDED, "bytes/s"),
    ("bwd_bytes_bulk_avg", False, 0.0, _UNBOUNDED, "bytes"),
    ("bwd_pkts_bulk_avg", False, 0.0, _UNBOUNDED, "packets"),
    ("bwd_bulk_rate_avg", False, 0.0, _UNBOUNDED, "bytes/s"),
    # active / idle periods
    ("active_mean", False, 0.0, _UNBOUNDED, "s"),
    ("active_std", False, 0.0, _UNBOUNDED, "s"),
    ("active_max", False, 0.0, _UNBOUNDED, "s"),
    ("active_min", False, 0.0, _UNBOUNDED, "s"),
    ("idle_mean", False, 0.0, _UNBOUNDED, "s"),
    ("idle_std", False, 0.0, _UNBOUNDED, "s"),
    ("idle_max", False, 0.0, _UNBOUNDED, "s"),
    ("idle_min", False, 0.0, _UNBOUNDED, "s"),
    # entropy-like aggregates (bounded above by the bit width of the estimator)
    ("payload_entropy", False, 0.0, 8.0, "bits"),
    ("header_entropy", False, 0.0, 8.0, "bits"),
    ("iat_entropy", False, 0.0, 8.0, "bits"),
    ("pkt_size_entropy", False, 0.0, 8.0, "bits"),
]

_DEFAULT_CONSTRAINTS: list[tuple[str, str]] = [
    ("total_fwd_bytes", "total_fwd_packets"),
    ("total_bwd_bytes", "total_bwd_packets"),
    ("fwd_pkt_len_max", "fwd_pkt_len_min"),
    ("bwd_pkt_len_max", "bwd_pkt_len_min"),
    ("pkt_len_max", "pkt_len_mean"),
    ("pkt_len_mean", "pkt_len_min"),
    ("flow_iat_max", "flow_iat_min"),
    ("fwd_iat_max", "fwd_iat_min"),
    ("bwd_iat_max", "bwd_iat_min"),
    ("fwd_iat_total", "fwd_iat_max"),
    ("bwd_iat_total", "bwd_iat_max"),
    ("active_max", "active_min"),
    ("idle_max", "idle_min"),
]


def default_schema() -> FeatureSchema:
    """The shipped 78-feature flow schema (CICFlowMeter v4 style categories)."""
    feats = [
        FeatureSpec(name, CORE if core else DERIVED, lo, hi, unit)
        for name, core, lo, hi, unit in _DEFAULT_TABLE
    ]
    cons = [CrossConstraint("geq", a, b) for a, b in _DEFAULT_CONSTRAINTS]
    return FeatureSchema(feats, cons)


DEFAULT_FEATURE_COUNT = len(_DEFAULT_TABLE)
