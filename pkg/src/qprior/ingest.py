"""Dataset loading, preprocessing, splitting and the synthetic suite generator."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import (
    FEATURE_NAMES,
    MISSING,
    FaultMatrix,
    Suite,
    TestCaseRecord,
)

CSV_COLUMNS: tuple[str, ...] = ("id", *FEATURE_NAMES, "coverage", "detects")


class IngestError(ValueError):
    pass


class ParseError(IngestError):
    def __init__(self, line: int, column: str, message: str) -> None:
        super().__init__(f"line {line}, field {column!r}: {message}")
        self.line = line
        self.column = column


class SchemaError(IngestError):
    def __init__(self, message: str, columns: Sequence[str] = ()) -> None:
        super().__init__(message)
        self.columns = tuple(columns)


class AllMissingColumn(IngestError):
    def __init__(self, feature: str) -> None:
        super().__init__(f"feature {feature!r} has no observed values")
        self.feature = feature


class KTooLarge(IngestError):
    pass


class ConfigError(IngestError):
    pass


@dataclass(frozen=True)
class Dataset:
    suites: tuple[Suite, ...]
    feature_names: tuple[str, ...] = FEATURE_NAMES
    normalization_params: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "suites", tuple(self.suites))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @classmethod
    def single(cls, suite: Suite, feature_names: Sequence[str] = FEATURE_NAMES) -> Dataset:
        return cls((suite,), tuple(feature_names))

    @property
    def records(self) -> list[TestCaseRecord]:
        return [r for s in self.suites for r in s.records]

    def __len__(self) -> int:
        return sum(len(s.records) for s in self.suites)

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Feature matrix (MISSING as NaN) and 0/1 label vector."""
        recs = self.records
        X = np.array(
            [[np.nan if v is MISSING else float(v) for v in r.feature_row(self.feature_names)]
             for r in recs],
            dtype=float,
        ).reshape(len(recs), len(self.feature_names))
        y = np.array([int(bool(r.label)) for r in recs], dtype=int)
        return X, y

    def map_records(self, fn) -> Dataset:
        suites = tuple(
            Suite(s.suite_id, tuple(fn(r) for r in s.records), s.faults) for s in self.suites
        )
        return replace(self, suites=suites)

    def subset(self, keep: Iterable[tuple[int, int]]) -> Dataset:
        """Keep records addressed by (suite index, record index) pairs."""
        wanted: dict[int, set[int]] = {}
        for si, ri in keep:
            wanted.setdefault(si, set()).add(ri)
        suites = []
        for si, suite in enumerate(self.suites):
            if si not in wanted:
                continue
            recs = tuple(r for ri, r in enumerate(suite.records) if ri in wanted[si])
            suites.append(Suite(suite.suite_id, recs, suite.faults.restrict(r.id for r in recs)))
        return replace(self, suites=tuple(suites))

    def positions(self) -> list[tuple[int, int]]:
        return [(si, ri) for si, s in enumerate(self.suites) for ri in range(len(s.records))]

    def select_features(self, names: Sequence[str]) -> Dataset:
        unknown = [n for n in names if n not in self.feature_names]
        if unknown:
            raise SchemaError(f"unknown features {unknown}", unknown)
        params = {k: v for k, v in self.normalization_params.items() if k in names}
        return replace(self, feature_names=tuple(names), normalization_params=params)


# --------------------------------------------------------------------- loading

def _split_ids(cell: str) -> frozenset[str]:
    return frozenset(part.strip() for part in cell.split(";") if part.strip())


def _check_header(header: Sequence[str]) -> None:
    unknown = [c for c in header if c not in CSV_COLUMNS]
    if unknown:
        raise SchemaError(f"unknown column(s): {', '.join(unknown)}", unknown)
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}", missing)


def _parse_number(value, line: int, column: str) -> float | None:
    if value is None or value == "":
        return MISSING
    if isinstance(value, bool):
        raise ParseError(line, column, f"expected a number, got {value!r}")
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ParseError(line, column, f"expected a number, got {value!r}") from None
    if math.isnan(out) or math.isinf(out):
        raise ParseError(line, column, f"non-finite value {value!r}")
    return out


def _parse_ids(value, line: int, column: str) -> frozenset[str]:
    if value is None:
        return frozenset()
    if isinstance(value, str):
        return _split_ids(value)
    if isinstance(value, list) and all(isinstance(v, str) for v in value):
        return frozenset(value)
    raise ParseError(line, column, "expected ';'-separated ids or a list of strings")


def _record_from_row(row: Mapping, line: int) -> TestCaseRecord:
    test_id = row.get("id")
    if not isinstance(test_id, str) or not test_id.strip():
        raise ParseError(line, "id", "empty test id")
    features = {name: _parse_number(row.get(name), line, name) for name in FEATURE_NAMES}
    exec_time = features["exec_time"]
    if exec_time is not MISSING and exec_time < 0:
        raise ParseError(line, "exec_time", "negative execution time")
    return TestCaseRecord(
        id=test_id.strip(),
        features=features,
        coverage=_parse_ids(row.get("coverage"), line, "coverage"),
        exec_time=math.nan if exec_time is MISSING else exec_time,
        detects=_parse_ids(row.get("detects"), line, "detects"),
    )


def parse_csv(text: str) -> list[TestCaseRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("empty file: header row required") from None
    _check_header(header)
    records = []
    for line, cells in enumerate(reader, start=2):
        if not cells or all(not c.strip() for c in cells):
            continue
        if len(cells) != len(header):
            raise ParseError(line, "*", f"expected {len(header)} cells, got {len(cells)}")
        records.append(_record_from_row(dict(zip(header, (c.strip() for c in cells))), line))
    return records


def parse_json(text: str) -> list[TestCaseRecord]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, "*", exc.msg) from None
    if not isinstance(data, list):
        raise SchemaError("top-level JSON value must be an array of test objects")
    records = []
    for index, obj in enumerate(data, start=1):
        if not isinstance(obj, dict):
            raise ParseError(index, "*", "expected an object")
        _check_header(list(obj))
        records.append(_record_from_row(obj, index))
    return records


def load_dataset(path: str | Path, format: str | None = None) -> Dataset:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    text = path.read_text()
    if fmt == "csv":
        records = parse_csv(text)
    elif fmt == "json":
        records = parse_json(text)
    else:
        raise SchemaError(f"unsupported format {fmt!r}")
    return Dataset.single(Suite.from_records(path.stem, records))


def _format_number(value: float | None) -> str:
    if value is MISSING or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


def records_to_rows(records: Iterable[TestCaseRecord]) -> list[dict]:
    rows = []
    for r in records:
        row: dict = {"id": r.id}
        for name in FEATURE_NAMES:
            value = r.features.get(name)
            row[name] = None if value is MISSING else float(value)
        row["coverage"] = sorted(r.coverage)
        row["detects"] = sorted(r.detects)
        rows.append(row)
    return rows


def dump_csv(records: Iterable[TestCaseRecord]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in records_to_rows(records):
        writer.writerow(
            [row["id"]]
            + [_format_number(row[n]) for n in FEATURE_NAMES]
            + [";".join(row["coverage"]), ";".join(row["detects"])]
        )
    return out.getvalue()


def dump_json(records: Iterable[TestCaseRecord]) -> str:
    return json.dumps(records_to_rows(records), indent=1) + "\n"


def save_records(records: Iterable[TestCaseRecord], path: str | Path, format: str = "csv") -> None:
    path = Path(path)
    path.write_text(dump_csv(records) if format == "csv" else dump_json(records))


# --------------------------------------------------------------- preprocessing

def impute_missing(dataset: Dataset) -> Dataset:
    """Replace MISSING cells with the column mean over the whole dataset."""
    means: dict[str, float] = {}
    recs = dataset.records
    for name in dataset.feature_names:
        observed = [r.features.get(name) for r in recs if r.features.get(name) is not MISSING]
        if not observed:
            if recs:
                raise AllMissingColumn(name)
            continue
        means[name] = float(np.mean(observed))

    def fill(r: TestCaseRecord) -> TestCaseRecord:
        if all(r.features.get(n) is not MISSING for n in dataset.feature_names) and not math.isnan(r.exec_time):
            return r
        feats = dict(r.features)
        for name in dataset.feature_names:
            if feats.get(name) is MISSING:
                feats[name] = means[name]
        exec_time = r.exec_time
        if math.isnan(exec_time):
            exec_time = feats.get("exec_time") or 0.0
        return replace(r, features=feats, exec_time=exec_time)

    return dataset.map_records(fill)


def drop_low_coverage(dataset: Dataset, min_elements: int) -> tuple[Dataset, int]:
    keep = [
        (si, ri)
        for si, s in enumerate(dataset.suites)
        for ri, r in enumerate(s.records)
        if len(r.coverage) >= min_elements
    ]
    dropped = len(dataset) - len(keep)
    if dropped == 0:
        return dataset, 0
    return dataset.subset(keep), dropped


def fit_params(dataset: Dataset) -> dict[str, tuple[float, float]]:
    X, _ = dataset.to_arrays()
    if np.isnan(X).any():
        raise IngestError("normalization requires imputed data")
    params = {}
    for j, name in enumerate(dataset.feature_names):
        col = X[:, j]
        params[name] = (float(col.min()), float(col.max())) if len(col) else (0.0, 0.0)
    return params


def scale_value(value: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.0
    return (value - lo) / (hi - lo)


def apply_normalize(dataset: Dataset, params: Mapping[str, tuple[float, float]]) -> Dataset:
    """Min-max scale every feature with previously fitted params (no clamping)."""
    missing = [n for n in dataset.feature_names if n not in params]
    if missing:
        raise SchemaError(f"no normalization params for {missing}", missing)

    def scale(r: TestCaseRecord) -> TestCaseRecord:
        feats = dict(r.features)
        for name in dataset.feature_names:
            lo, hi = params[name]
            feats[name] = scale_value(float(feats[name]), lo, hi)
        return r.with_features(feats)

    out = dataset.map_records(scale)
    return replace(out, normalization_params=dict(params))


def fit_normalize(dataset: Dataset, fit_on: Dataset | None = None) -> Dataset:
    """Fit min-max params on ``fit_on`` (the training portion) or on ``dataset``."""
    params = fit_params(fit_on if fit_on is not None else dataset)
    return apply_normalize(dataset, params)


# ------------------------------------------------------------------- splitting

@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratify_on: str = "label"

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")


def _class_members(labels: Sequence[int]) -> dict[int, list[int]]:
    members: dict[int, list[int]] = {}
    for i, y in enumerate(labels):
        members.setdefault(int(y), []).append(i)
    return dict(sorted(members.items(), reverse=True))


def stratified_split_indices(
    labels: Sequence[int], train_fraction: float, seed: int
) -> tuple[list[int], list[int]]:
    rng = np.random.default_rng(seed)
    train: list[int] = []
    test: list[int] = []
    for members in _class_members(labels).values():
        order = [members[i] for i in rng.permutation(len(members))]
        # Guard the floor against 0.2 * 100 == 20.000000000000004 style drift.
        n_test = math.floor(len(members) * (1.0 - train_fraction) + 1e-9)
        test.extend(order[:n_test])
        train.extend(order[n_test:])
    return sorted(train), sorted(test)


def stratified_split(dataset: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    positions = dataset.positions()
    labels = [int(bool(r.label)) for r in dataset.records]
    train_idx, test_idx = stratified_split_indices(labels, spec.train_fraction, spec.seed)
    return (
        dataset.subset(positions[i] for i in train_idx),
        dataset.subset(positions[i] for i in test_idx),
    )


def stratified_fold_indices(labels: Sequence[int], k: int, seed: int) -> list[np.ndarray]:
    """Deal shuffled, class-grouped indices round-robin into ``k`` folds."""
    n = len(labels)
    if k < 2:
        raise KTooLarge(f"k must be at least 2, got {k}")
    if k > n:
        raise KTooLarge(f"k={k} exceeds record count {n}")
    rng = np.random.default_rng(seed)
    dealt: list[int] = []
    for members in _class_members(labels).values():
        dealt.extend(members[i] for i in rng.permutation(len(members)))
    folds: list[list[int]] = [[] for _ in range(k)]
    for pos, index in enumerate(dealt):
        folds[pos % k].append(index)
    return [np.array(sorted(f), dtype=int) for f in folds]


def kfold_partition(dataset: Dataset, k: int, seed: int) -> list[Dataset]:
    positions = dataset.positions()
    labels = [int(bool(r.label)) for r in dataset.records]
    return [
        dataset.subset(positions[i] for i in fold)
        for fold in stratified_fold_indices(labels, k, seed)
    ]


# ------------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic suite generator.

    ``redundancy`` sets the share of each test's coverage drawn from a core
    set shared with its cluster, so it controls pairwise coverage overlap.
    ``kill_score`` forces every test's mutation kill probability when set.
    """

    n_tests: int = 100
    n_faults: int = 25
    n_code_elements: int = 300
    redundancy: float = 0.3
    fault_skew: float = 1.5
    seed: int = 0
    churn_alpha: float = 2.0
    coverage_mean: float = 8.0
    cluster_size: int = 16
    n_classes: int = 12
    kill_score: float | None = None
    kill_alpha: float = 2.0
    kill_beta: float = 2.0
    suite_id: str = "synthetic"

    def __post_init__(self) -> None:
        for name in ("n_tests", "n_faults", "n_code_elements", "cluster_size", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not 0.0 <= self.redundancy <= 1.0:
            raise ConfigError("redundancy must be in [0, 1]")
        if self.fault_skew <= 0 or self.churn_alpha <= 0:
            raise ConfigError("fault_skew and churn_alpha must be positive")
        if self.coverage_mean <= 0:
            raise ConfigError("coverage_mean must be positive")
        if self.kill_score is not None and not 0.0 <= self.kill_score <= 1.0:
            raise ConfigError("kill_score must be in [0, 1]")


@dataclass
class _SyntheticTest:
    id: str
    cluster: int
    coverage: np.ndarray  # element indices
    kill: float
    time_factor: float


class SyntheticWorld:
    """Code elements plus the tests exercising them.

    Faults are drawn per build on top of the world, so one world can provide
    both a labelled history and a fresh evaluation suite.
    """

    MAX_FAULT_RETRIES = 200

    def __init__(self, config: SyntheticConfig) -> None:
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        E = config.n_code_elements
        self.churn = self.rng.pareto(config.churn_alpha, E) + 1.0
        self.complexity = 1.0 + self.rng.poisson(1.0 + 2.0 * np.log(self.churn))
        self.element_class = np.minimum(
            np.arange(E) * config.n_classes // E, config.n_classes - 1
        )
        self.element_names = [f"e{e:04d}" for e in range(E)]
        self.class_names = [f"Class{c:02d}" for c in range(config.n_classes)]
        n_clusters = max(1, math.ceil(config.n_tests / config.cluster_size))
        # Tests carry their cluster's whole core plus private elements; a core
        # share f gives an expected within-cluster Jaccard of f / (2 - f).
        self.core_share = 2.0 * config.redundancy / (1.0 + config.redundancy)
        core_size = round(self.core_share * config.coverage_mean)
        # Shared cores favour high-churn code: the hot spots many tests touch.
        hot = self.churn / self.churn.sum()
        self.cores = [
            np.sort(self.rng.choice(E, size=min(core_size, E), replace=False, p=hot))
            for _ in range(n_clusters)
        ]
        self.feature_bias = {n: 0.0 for n in FEATURE_NAMES if n != "exec_time"}
        self.tests: list[_SyntheticTest] = []
        self._next_id = 0
        for i in range(config.n_tests):
            self.add_test(cluster=i // config.cluster_size)

    # -- test population --------------------------------------------------

    def add_test(self, cluster: int | None = None) -> str:
        cfg, rng = self.config, self.rng
        E = cfg.n_code_elements
        if cluster is None:
            cluster = int(rng.integers(len(self.cores)))
        core = self.cores[cluster]
        chosen = set(core.tolist())
        private = int(rng.poisson((1.0 - self.core_share) * cfg.coverage_mean))
        private = max(private, 1 - len(chosen))
        others = np.setdiff1d(np.arange(E), core)
        private = min(private, len(others))
        if private > 0:
            chosen.update(rng.choice(others, size=private, replace=False).tolist())
        kill = cfg.kill_score if cfg.kill_score is not None else float(rng.beta(cfg.kill_alpha, cfg.kill_beta))
        test = _SyntheticTest(
            id=f"t{self._next_id:04d}",
            cluster=cluster,
            coverage=np.array(sorted(chosen), dtype=int),
            kill=kill,
            time_factor=float(rng.lognormal(0.0, 0.5)),
        )
        self._next_id += 1
        self.tests.append(test)
        return test.id

    def remove_test(self, test_id: str) -> None:
        self.tests = [t for t in self.tests if t.id != test_id]

    def drift(self, magnitude: float) -> None:
        """Random-walk the code base by ``magnitude``.

        Element churn moves (so faults land elsewhere) and every measured
        feature except execution time picks up a multiplicative bias, which
        stales a model trained on earlier builds.
        """
        if magnitude <= 0:
            return
        self.churn = self.churn * np.exp(self.rng.normal(0.0, magnitude, self.churn.shape))
        for name in self.feature_bias:
            self.feature_bias[name] += float(self.rng.normal(0.0, magnitude))

    # -- faults -----------------------------------------------------------

    def draw_faults(self, n_faults: int, prefix: str = "f") -> tuple[dict[str, set[str]], dict[str, int]]:
        """Place faults and decide detection.

        Returns test id -> detected faults, and fault -> element index.
        Every fault is detected by at least one test.
        """
        rng = self.rng
        covered = np.unique(np.concatenate([t.coverage for t in self.tests])) if self.tests else np.array([], int)
        if covered.size == 0:
            raise ConfigError("no test covers any code element")
        weights = self.churn[covered] ** self.config.fault_skew
        weights = weights / weights.sum()
        coverers: dict[int, list[_SyntheticTest]] = {}
        for t in self.tests:
            for e in t.coverage.tolist():
                coverers.setdefault(e, []).append(t)
        detects: dict[str, set[str]] = {t.id: set() for t in self.tests}
        location: dict[str, int] = {}
        for j in range(n_faults):
            fault = f"{prefix}{j:03d}"
            for _ in range(self.MAX_FAULT_RETRIES):
                element = int(covered[rng.choice(covered.size, p=weights)])
                hits = [t.id for t in coverers[element] if rng.random() < t.kill]
                if hits:
                    break
            else:
                raise ConfigError(f"could not place a detectable fault after {self.MAX_FAULT_RETRIES} draws")
            location[fault] = element
            for tid in hits:
                detects[tid].add(fault)
        return detects, location

    # -- records ----------------------------------------------------------

    def test_features(self, test: _SyntheticTest) -> dict[str, float]:
        rng, E = self.rng, self.config.n_code_elements
        cov = test.coverage
        k = len(cov)
        exec_time = self.exec_time(test)
        line = k / E
        values = {
            "cyclomatic_complexity": float(max(1.0, self.complexity[cov].mean() + rng.normal(0, 0.5))),
            "code_churn": float(self.churn[cov].sum() * rng.lognormal(0.0, 0.15)),
            "dependency_degree": float(len(set(self.element_class[cov].tolist())) + rng.poisson(1.0)),
            "exec_time": exec_time,
            "line_coverage": float(line),
            "branch_coverage": float(line * rng.uniform(0.5, 1.0)),
            "mutation_kill_score": float(np.clip(test.kill + rng.normal(0, 0.05), 0.0, 1.0)),
        }
        for name, bias in self.feature_bias.items():
            if bias:
                values[name] *= math.exp(bias)
        return values

    @staticmethod
    def exec_time(test: _SyntheticTest) -> float:
        return round(0.25 * len(test.coverage) * test.time_factor, 6)

    def records(self, detects: Mapping[str, set[str]] | None = None) -> list[TestCaseRecord]:
        detects = detects or {}
        out = []
        for t in self.tests:
            out.append(
                TestCaseRecord(
                    id=t.id,
                    features=self.test_features(t),
                    coverage=frozenset(self.element_names[e] for e in t.coverage),
                    exec_time=self.exec_time(t),
                    detects=frozenset(detects.get(t.id, ())),
                )
            )
        return out

    def class_of(self, element: int) -> str:
        return self.class_names[int(self.element_class[element])]

    def draw_suite(self, suite_id: str | None = None, prefix: str = "f") -> tuple[Suite, dict[str, int]]:
        detects, location = self.draw_faults(self.config.n_faults, prefix)
        records = self.records(detects)
        faults = FaultMatrix.from_records(records, faults=sorted(location))
        return Suite(suite_id or self.config.suite_id, tuple(records), faults), location


def generate_synthetic_suite(config: SyntheticConfig) -> tuple[list[TestCaseRecord], FaultMatrix]:
    suite, _ = SyntheticWorld(config).draw_suite()
    return list(suite.records), suite.faults


def mean_pairwise_jaccard(records: Sequence[TestCaseRecord]) -> float:
    total, pairs = 0.0, 0
    for i in range(len(records)):
        a = records[i].coverage
        for j in range(i + 1, len(records)):
            b = records[j].coverage
            union = len(a | b)
            total += len(a & b) / union if union else 0.0
            pairs += 1
    return total / pairs if pairs else 0.0


def preprocess(dataset: Dataset, min_elements: int = 1) -> tuple[Dataset, int]:
    """Imputation then low-coverage filtering; normalization is left to the caller."""
    dataset = impute_missing(dataset)
    return drop_low_coverage(dataset, min_elements)
