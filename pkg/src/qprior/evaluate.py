"""APFD, time-to-detection, overhead ledgers and paired significance testing."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import POLICIES, FaultMatrix, Ordering, SuiteCategory, TestCaseRecord, categorize_suite

LEDGER_COMPONENTS: tuple[str, ...] = (
    "feature_extraction",
    "prediction",
    "qubo_build",
    "serialize_transfer",
    "solve",
    "parse_order",
)

SIGNIFICANCE_SEED = 20250101


class EvaluationError(ValueError):
    pass


class NoFaults(EvaluationError):
    pass


class LengthMismatch(EvaluationError):
    pass


@dataclass(frozen=True)
class OverheadLedger:
    feature_extraction: float = 0.0
    prediction: float = 0.0
    qubo_build: float = 0.0
    serialize_transfer: float = 0.0
    solve: float = 0.0
    parse_order: float = 0.0

    def __post_init__(self) -> None:
        for name in LEDGER_COMPONENTS:
            value = float(getattr(self, name))
            if value < 0:
                raise EvaluationError(f"negative ledger component {name}={value}")
            object.__setattr__(self, name, value)

    @property
    def total(self) -> float:
        return math.fsum(self.components().values())

    def components(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in LEDGER_COMPONENTS}

    def __add__(self, other: OverheadLedger) -> OverheadLedger:
        return OverheadLedger(**{n: getattr(self, n) + getattr(other, n) for n in LEDGER_COMPONENTS})

    def to_dict(self) -> dict[str, float]:
        out = self.components()
        out["total"] = self.total
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, float]) -> OverheadLedger:
        return cls(**{n: float(data.get(n, 0.0)) for n in LEDGER_COMPONENTS})


@dataclass(frozen=True)
class MetricsRecord:
    policy: str
    suite_id: str
    seed: int
    n: int
    m: int
    apfd: float
    tet: float
    overhead: OverheadLedger = field(default_factory=OverheadLedger)
    tf: tuple[int, ...] = ()

    @property
    def category(self) -> SuiteCategory:
        return categorize_suite(self.n)

    def to_row(self) -> dict:
        row = {
            "policy": self.policy,
            "suite_id": self.suite_id,
            "category": self.category.value,
            "seed": self.seed,
            "n": self.n,
            "m": self.m,
            "apfd": self.apfd,
            "tet": self.tet,
            "overhead_total": self.overhead.total,
        }
        for name, value in self.overhead.components().items():
            row[f"overhead_{name}"] = value
        return row


METRICS_COLUMNS: tuple[str, ...] = (
    "policy", "suite_id", "category", "seed", "n", "m", "apfd", "tet", "overhead_total",
    *(f"overhead_{c}" for c in LEDGER_COMPONENTS),
)


# ------------------------------------------------------------------------ APFD

def first_detections(ordering: Ordering, faults: FaultMatrix) -> list[int]:
    """1-based position of the first detecting test, per detectable fault."""
    position = {tid: k for k, tid in enumerate(ordering.sequence, start=1)}
    missing = [tid for tid in faults.rows if tid not in position]
    if missing:
        raise EvaluationError(f"ordering omits tests {missing[:5]}")
    tf = []
    for j in range(faults.m):
        hits = [position[tid] for tid, row in faults.rows.items() if row[j]]
        if hits:
            tf.append(min(hits))
    return tf


def apfd(ordering: Ordering, faults: FaultMatrix) -> tuple[float, list[int]]:
    """1 - sum(TF)/(n*m) + 1/(2n) over faults some test detects."""
    tf = first_detections(ordering, faults)
    n, m = len(ordering.sequence), len(tf)
    if m == 0:
        raise NoFaults("no detectable faults")
    return 1.0 - sum(tf) / (n * m) + 1.0 / (2 * n), tf


def tet(ordering: Ordering, faults: FaultMatrix, records: Iterable[TestCaseRecord]) -> float:
    """Execution time until every detectable fault has been seen, with early exit."""
    times = {r.id: r.exec_time for r in records}
    outstanding = {
        j for j in range(faults.m) if any(row[j] for row in faults.rows.values())
    }
    if not outstanding:
        return math.fsum(times[tid] for tid in ordering.sequence)
    elapsed = 0.0
    for tid in ordering.sequence:
        elapsed += times[tid]
        row = faults.rows.get(tid)
        if row is not None:
            outstanding = {j for j in outstanding if not row[j]}
        if not outstanding:
            break
    return elapsed


# -------------------------------------------------------------- significance

def paired_significance(
    a: Sequence[float],
    b: Sequence[float],
    n_resamples: int = 10_000,
    seed: int = SIGNIFICANCE_SEED,
) -> float:
    """Two-sided paired sign-flip permutation test on the mean difference.

    Returns (count(|resampled mean| >= |observed mean|) + 1) / (n_resamples + 1).
    """
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} vs {len(b)} paired values")
    if len(a) < 5:
        raise LengthMismatch("need at least five pairs")
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    observed = abs(d.mean())
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=(n_resamples, len(d))) * 2 - 1
    resampled = np.abs((signs * d).mean(axis=1))
    extreme = int(np.count_nonzero(resampled >= observed - 1e-12 * max(1.0, observed)))
    return (extreme + 1) / (n_resamples + 1)


# ----------------------------------------------------------------- aggregation

_CATEGORY_ORDER = {c: k for k, c in enumerate(SuiteCategory)}
_POLICY_ORDER = {p: k for k, p in enumerate(POLICIES)}


def aggregate(metrics: Sequence[MetricsRecord]) -> list[dict]:
    """Mean / population std of APFD plus mean TET and overhead per (policy, category)."""
    if not metrics:
        raise EvaluationError("nothing to aggregate")
    groups: dict[tuple[str, SuiteCategory], list[MetricsRecord]] = {}
    for rec in metrics:
        groups.setdefault((rec.policy, rec.category), []).append(rec)
    rows = []
    for policy, category in sorted(
        groups, key=lambda k: (_POLICY_ORDER.get(k[0], len(POLICIES)), k[0], _CATEGORY_ORDER[k[1]])
    ):
        recs = groups[(policy, category)]
        values = np.array([r.apfd for r in recs])
        rows.append(
            {
                "policy": policy,
                "category": category.value,
                "count": len(recs),
                "apfd_mean": float(values.mean()),
                "apfd_std": float(values.std()),
                "tet_mean": float(np.mean([r.tet for r in recs])),
                "overhead_mean": float(np.mean([r.overhead.total for r in recs])),
            }
        )
    return rows


# ------------------------------------------------------------------ CSV files

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_to_csv(metrics: Iterable[MetricsRecord]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for rec in metrics:
        row = rec.to_row()
        writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
    return out.getvalue()


def write_metrics(metrics: Iterable[MetricsRecord], path: str | Path) -> None:
    Path(path).write_text(metrics_to_csv(metrics))


def read_metrics_rows(path_or_text: str | Path) -> list[dict]:
    """Metrics CSV rows as dicts with numeric fields converted."""
    text = path_or_text.read_text() if isinstance(path_or_text, Path) else str(path_or_text)
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        row: dict = {}
        for key, value in raw.items():
            if key in ("policy", "suite_id", "category"):
                row[key] = value
            elif key in ("seed", "n", "m"):
                row[key] = int(value) if value not in ("", None) else None
            else:
                row[key] = float(value) if value not in ("", None) else None
        rows.append(row)
    return rows


def metrics_from_rows(rows: Iterable[Mapping]) -> list[MetricsRecord]:
    out = []
    for row in rows:
        ledger = OverheadLedger.from_dict(
            {c: row.get(f"overhead_{c}") or 0.0 for c in LEDGER_COMPONENTS}
        )
        out.append(
            MetricsRecord(
                row["policy"], row.get("suite_id", ""), int(row.get("seed") or 0),
                int(row["n"]), int(row["m"]), float(row["apfd"]), float(row["tet"]), ledger,
            )
        )
    return out
