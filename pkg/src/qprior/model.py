"""Core domain types: test records, fault matrices, orderings, suite categories."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

FEATURE_NAMES: tuple[str, ...] = (
    "cyclomatic_complexity",
    "code_churn",
    "dependency_degree",
    "exec_time",
    "line_coverage",
    "branch_coverage",
    "mutation_kill_score",
)

# Features that are fractions by construction.
UNIT_FEATURES = ("line_coverage", "branch_coverage", "mutation_kill_score")

# A missing feature cell. Kept as None so it survives JSON round trips as null.
MISSING = None

POLICIES: tuple[str, ...] = ("random", "greedy", "ml_only", "quantum_enhanced")


class ModelError(ValueError):
    """Raised when a domain object is constructed in an invalid state."""


@dataclass(frozen=True)
class TestCaseRecord:
    id: str
    features: Mapping[str, float | None]
    coverage: frozenset[str] = frozenset()
    exec_time: float = 0.0
    detects: frozenset[str] = frozenset()
    label: bool | None = None

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", dict(self.features))
        object.__setattr__(self, "coverage", frozenset(self.coverage))
        object.__setattr__(self, "detects", frozenset(self.detects))
        if self.label is None:
            object.__setattr__(self, "label", bool(self.detects))

    def feature_row(self, names: Sequence[str]) -> list[float | None]:
        return [self.features.get(name) for name in names]

    def with_features(self, features: Mapping[str, float | None]) -> TestCaseRecord:
        return TestCaseRecord(
            self.id, features, self.coverage, self.exec_time, self.detects, self.label
        )


@dataclass(frozen=True)
class FaultMatrix:
    """Which test detects which fault.

    ``rows`` maps a test id to a tuple of booleans, one per entry of ``faults``.
    Use :meth:`from_records` to build one with undetectable faults dropped.
    """

    faults: tuple[str, ...] = ()
    rows: Mapping[str, tuple[bool, ...]] = field(default_factory=dict)
    dropped: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "faults", tuple(self.faults))
        object.__setattr__(
            self, "rows", {k: tuple(bool(b) for b in v) for k, v in self.rows.items()}
        )

    @property
    def m(self) -> int:
        return len(self.faults)

    @classmethod
    def from_records(
        cls, records: Iterable[TestCaseRecord], faults: Iterable[str] | None = None
    ) -> FaultMatrix:
        records = list(records)
        seen = sorted({f for r in records for f in r.detects})
        if faults is None:
            candidates = seen
        else:
            candidates = list(dict.fromkeys(faults))
        detected = set(seen)
        kept = [f for f in candidates if f in detected]
        rows = {r.id: tuple(f in r.detects for f in kept) for r in records}
        return cls(tuple(kept), rows, dropped=len(candidates) - len(kept))

    def restrict(self, test_ids: Iterable[str]) -> FaultMatrix:
        """Keep only the given tests; faults nobody detects any more are dropped."""
        ids = [t for t in test_ids if t in self.rows]
        keep = [
            j for j in range(self.m) if any(self.rows[t][j] for t in ids)
        ]
        rows = {t: tuple(self.rows[t][j] for j in keep) for t in ids}
        return FaultMatrix(
            tuple(self.faults[j] for j in keep),
            rows,
            dropped=self.dropped + self.m - len(keep),
        )

    def detected_by(self, test_id: str) -> set[str]:
        row = self.rows.get(test_id, ())
        return {f for f, hit in zip(self.faults, row) if hit}


class SuiteCategory(str, Enum):
    SMALL = "Small"
    MEDIUM = "Medium"
    LARGE = "Large"


def categorize_suite(n_tests: int) -> SuiteCategory:
    if n_tests < 0:
        raise ModelError(f"negative suite size {n_tests}")
    if n_tests < 50:
        return SuiteCategory.SMALL
    if n_tests <= 100:
        return SuiteCategory.MEDIUM
    return SuiteCategory.LARGE


@dataclass(frozen=True)
class Ordering:
    """A full execution order; ``selected`` is the prefix the optimizer chose."""

    sequence: tuple[str, ...]
    selected: tuple[str, ...]
    policy: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "sequence", tuple(self.sequence))
        object.__setattr__(self, "selected", tuple(self.selected))
        if len(set(self.sequence)) != len(self.sequence):
            raise ModelError("sequence contains duplicate test ids")
        if self.policy not in POLICIES:
            raise ModelError(f"unknown policy {self.policy!r}")
        k = len(self.selected)
        if set(self.sequence[:k]) != set(self.selected) or len(set(self.selected)) != k:
            raise ModelError("selected tests must form a prefix of the sequence")

    def is_permutation_of(self, ids: Iterable[str]) -> bool:
        return Counter(self.sequence) == Counter(ids)

    def to_dict(self, suite_id: str = "", seed: int | None = None) -> dict:
        return {
            "policy": self.policy,
            "suite_id": suite_id,
            "sequence": list(self.sequence),
            "selected": list(self.selected),
            "seed": seed,
        }

    def to_json(self, suite_id: str = "", seed: int | None = None) -> str:
        return json.dumps(self.to_dict(suite_id, seed), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping) -> Ordering:
        sequence = tuple(data["sequence"])
        chosen = set(data["selected"])
        # Keep the selected ids in sequence order regardless of how they were stored.
        selected = tuple(t for t in sequence if t in chosen)
        if len(selected) != len(chosen):
            raise ModelError("selected ids missing from sequence")
        return cls(sequence, selected, data["policy"])

    @classmethod
    def from_json(cls, text: str) -> Ordering:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Issue:
    kind: str
    subject: str

    def __str__(self) -> str:
        return f"{self.kind}({self.subject!r})"


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[Issue, ...] = ()
    warnings: tuple[Issue, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.errors

    @property
    def undetectable(self) -> int:
        return sum(1 for w in self.warnings if w.kind == "UndetectableFault")


def validate_suite(
    records: Sequence[TestCaseRecord], faults: FaultMatrix
) -> ValidationReport:
    errors: list[Issue] = []
    warnings: list[Issue] = []
    counts = Counter(r.id for r in records)
    for test_id, count in counts.items():
        if count > 1:
            errors.append(Issue("DuplicateId", test_id))
    for r in records:
        if r.exec_time < 0:
            errors.append(Issue("NegativeTime", r.id))
        if r.detects and r.label is False:
            errors.append(Issue("LabelMismatch", r.id))
    for test_id, row in faults.rows.items():
        if len(row) != faults.m:
            errors.append(Issue("WidthMismatch", test_id))
    known = set(counts)
    for test_id in faults.rows:
        if test_id not in known:
            errors.append(Issue("UnknownTest", test_id))
    for j, fault in enumerate(faults.faults):
        if not any(len(row) > j and row[j] for row in faults.rows.values()):
            warnings.append(Issue("UndetectableFault", fault))
    return ValidationReport(tuple(errors), tuple(warnings))


@dataclass(frozen=True)
class Suite:
    """One test suite: its records and the faults they detect."""

    suite_id: str
    records: tuple[TestCaseRecord, ...]
    faults: FaultMatrix

    __test__ = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))

    @classmethod
    def from_records(cls, suite_id: str, records: Iterable[TestCaseRecord]) -> Suite:
        records = tuple(records)
        return cls(suite_id, records, FaultMatrix.from_records(records))

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.records)

    @property
    def category(self) -> SuiteCategory:
        return categorize_suite(len(self.records))

    def by_id(self) -> dict[str, TestCaseRecord]:
        return {r.id: r for r in self.records}

    def validate(self) -> ValidationReport:
        return validate_suite(self.records, self.faults)
