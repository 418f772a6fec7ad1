"""In-process CI simulation and the policy benchmark.

Every build mutates the synthetic code base, runs each policy, scores it, then
reveals the build's labels; the forest is refit on all labels seen so far
every ``retrain_every`` builds.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .anneal import AnnealSchedule
from .evaluate import (
    MetricsRecord,
    OverheadLedger,
    apfd,
    paired_significance,
    tet,
)
from .ingest import Dataset, SyntheticConfig, SyntheticWorld, apply_normalize, fit_params
from .learner import Forest, HyperParams, fit_forest
from .model import FEATURE_NAMES, POLICIES, Suite, TestCaseRecord
from .prioritize import PolicyConfig, run_policy
from .qubo import QuboConfig
from .timing import Clock, default_clock

log = logging.getLogger(__name__)

SUITE_SIZES = {"small": 30, "medium": 75, "large": 150}

# Forest used wherever no grid search is run (bench, simulation).
BENCH_HYPER = HyperParams(n_trees=50, max_depth=4, min_samples_leaf=3)

# One-off retune of the QUBO weights on the 100-test benchmark (30 seeds).
TUNED_QUBO = QuboConfig(lambda_r=0.5, lambda_t=0.15)


class PipelineError(RuntimeError):
    pass


class InsufficientBuilds(PipelineError):
    pass


def faults_for(n_tests: int) -> int:
    return max(3, n_tests // 4)


def _train(history: Sequence[TestCaseRecord], hyper: HyperParams, seed: int) -> tuple[Forest, dict]:
    data = Dataset.single(Suite.from_records("history", history))
    params = fit_params(data)
    X, y = apply_normalize(data, params).to_arrays()
    return fit_forest(X, y, hyper, seed, FEATURE_NAMES), params


def _normalized(suite: Suite, params: dict) -> Suite:
    return apply_normalize(Dataset.single(suite), params).suites[0]


def _score(policy_cfg: PolicyConfig, suite: Suite, forest: Forest, clock: Clock, seed: int) -> MetricsRecord:
    run = run_policy(suite, policy_cfg, forest, clock)
    value, tf = apfd(run.ordering, suite.faults)
    return MetricsRecord(
        policy_cfg.policy, suite.suite_id, seed, len(suite.records), len(tf),
        value, tet(run.ordering, suite.faults, suite.records), run.ledger, tuple(tf),
    )


# ------------------------------------------------------------------ benchmark

@dataclass(frozen=True)
class BenchConfig:
    policies: tuple[str, ...] = POLICIES
    redundancy: float = 0.3
    history_draws: int = 5
    hyper: HyperParams = BENCH_HYPER
    qubo_config: QuboConfig = TUNED_QUBO
    solver_kind: str = "sa"
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)
    greedy_key: str = "coverage_desc"


def benchmark_case(
    seed: int,
    n_tests: int,
    n_faults: int | None = None,
    config: BenchConfig = BenchConfig(),
    clock: Clock = default_clock,
    suite_id: str | None = None,
) -> list[MetricsRecord]:
    """One synthetic project: learn from past fault draws, score every policy on a new one."""
    world = SyntheticWorld(
        SyntheticConfig(
            n_tests=n_tests,
            n_faults=n_faults or faults_for(n_tests),
            n_code_elements=3 * n_tests,
            redundancy=config.redundancy,
            seed=seed,
            suite_id=suite_id or f"n{n_tests}-s{seed}",
        )
    )
    history: list[TestCaseRecord] = []
    for h in range(config.history_draws):
        past, _ = world.draw_suite(prefix=f"h{h}_")
        history.extend(past.records)
    forest, params = _train(history, config.hyper, seed)
    suite, _ = world.draw_suite()
    suite = _normalized(suite, params)
    out = []
    for policy in config.policies:
        policy_cfg = PolicyConfig(
            policy=policy,
            greedy_key=config.greedy_key,
            qubo_config=config.qubo_config,
            solver_kind=config.solver_kind,
            schedule=replace(config.schedule, seed=seed),
            seed=seed,
        )
        out.append(_score(policy_cfg, suite, forest, clock, seed))
    return out


def run_benchmark(
    seeds: Iterable[int],
    sizes: Iterable[str | int] = ("medium",),
    config: BenchConfig = BenchConfig(),
    clock: Clock = default_clock,
) -> list[MetricsRecord]:
    records = []
    for size in sizes:
        n = SUITE_SIZES[size] if isinstance(size, str) else int(size)
        for seed in seeds:
            records.extend(benchmark_case(seed, n, None, config, clock))
    return records


# ----------------------------------------------------------------- simulation

@dataclass(frozen=True)
class SimulationConfig:
    n_tests: int = 60
    n_faults: int = 15
    redundancy: float = 0.3
    drift: float = 0.1
    max_mutation: int = 3  # tests added / removed per build, each drawn from 0..max
    min_tests: int = 10
    retrain_every: int = 5
    retrain: bool = True
    history_draws: int = 3
    policies: tuple[str, ...] = POLICIES
    hyper: HyperParams = HyperParams(n_trees=30, max_depth=4, min_samples_leaf=3)
    qubo_config: QuboConfig = TUNED_QUBO
    solver_kind: str = "sa"
    schedule: AnnealSchedule = AnnealSchedule(sweeps=500, restarts=4)

    def __post_init__(self) -> None:
        if self.retrain_every < 1:
            raise PipelineError("retrain_every must be positive")
        unknown = [p for p in self.policies if p not in POLICIES]
        if unknown:
            raise PipelineError(f"unknown policies {unknown}")


@dataclass(frozen=True)
class BuildEvent:
    build_number: int
    commit_id: str
    added: tuple[str, ...]
    removed: tuple[str, ...]
    drift: float
    seed: int


@dataclass
class BuildLog:
    event: BuildEvent
    metrics: list[MetricsRecord]
    retrain: bool
    forest_version: int
    fault_classes: dict[str, int]
    n_tests: int

    def to_dict(self) -> dict:
        return {
            "build_number": self.event.build_number,
            "commit_id": self.event.commit_id,
            "seed": self.event.seed,
            "added": list(self.event.added),
            "removed": list(self.event.removed),
            "drift": self.event.drift,
            "n_tests": self.n_tests,
            "retrain": self.retrain,
            "forest_version": self.forest_version,
            "fault_classes": dict(sorted(self.fault_classes.items())),
            "metrics": [
                {**{k: v for k, v in m.to_row().items()}, "tf": list(m.tf)} for m in self.metrics
            ],
            "ledger": {
                m.policy: m.overhead.to_dict() for m in self.metrics
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class PipelineLog:
    builds: list[BuildLog] = field(default_factory=list)

    def retrain_builds(self) -> list[int]:
        return [b.event.build_number for b in self.builds if b.retrain]

    def apfd_series(self, policy: str) -> list[float]:
        out = []
        for b in self.builds:
            for m in b.metrics:
                if m.policy == policy:
                    out.append(m.apfd)
        return out

    def to_jsonl(self) -> str:
        return "".join(b.to_json() + "\n" for b in self.builds)


def commit_id(seed: int, build: int) -> str:
    return hashlib.sha1(f"{seed}:{build}".encode()).hexdigest()[:12]


def _mutate(world: SyntheticWorld, cfg: SimulationConfig, seed: int, build: int) -> BuildEvent:
    rng = np.random.default_rng([seed, build])
    n_remove = int(rng.integers(0, cfg.max_mutation + 1))
    n_add = int(rng.integers(0, cfg.max_mutation + 1))
    n_remove = max(0, min(n_remove, len(world.tests) - cfg.min_tests))
    removed = sorted(rng.choice([t.id for t in world.tests], size=n_remove, replace=False).tolist()) if n_remove else []
    for tid in removed:
        world.remove_test(tid)
    added = [world.add_test() for _ in range(n_add)]
    world.drift(cfg.drift)
    return BuildEvent(build, commit_id(seed, build), tuple(added), tuple(removed), cfg.drift, seed)


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def run_simulation(
    n_builds: int,
    seed: int = 0,
    config: SimulationConfig = SimulationConfig(),
    clock: Clock = default_clock,
    log_path: str | Path | None = None,
    resume: bool = False,
) -> PipelineLog:
    """Simulate ``n_builds`` CI builds.

    With ``log_path`` each build is appended as one JSON line. With ``resume``
    the builds already in the file are replayed without re-scoring, checked
    against the stored commit ids, and the simulation continues after them.
    """
    if n_builds < 1:
        raise PipelineError("n_builds must be at least 1")
    path = Path(log_path) if log_path is not None else None
    done = _read_jsonl(path) if (path is not None and resume) else []
    if path is not None and not resume:
        path.write_text("")

    world = SyntheticWorld(
        SyntheticConfig(
            n_tests=config.n_tests, n_faults=config.n_faults,
            n_code_elements=3 * config.n_tests, redundancy=config.redundancy, seed=seed,
        )
    )
    history: list[TestCaseRecord] = []
    for h in range(config.history_draws):
        past, _ = world.draw_suite(prefix=f"h{h}_")
        history.extend(past.records)
    forest, params = _train(history, config.hyper, seed)
    version = 1
    result = PipelineLog()

    for b in range(1, n_builds + 1):
        try:
            event = _mutate(world, config, seed, b)
            raw, location = world.draw_suite(suite_id=f"build-{b:04d}", prefix=f"b{b}_")
            report = raw.validate()
            if not report.valid:
                raise PipelineError(f"invalid suite: {', '.join(map(str, report.errors))}")
            replaying = b <= len(done)
            metrics: list[MetricsRecord] = []
            if replaying:
                if done[b - 1]["commit_id"] != event.commit_id:
                    raise PipelineError("existing log does not match this seed/configuration")
            else:
                suite = _normalized(raw, params)
                for policy in config.policies:
                    policy_cfg = PolicyConfig(
                        policy=policy,
                        qubo_config=config.qubo_config,
                        solver_kind=config.solver_kind,
                        schedule=replace(config.schedule, seed=seed * 1000 + b),
                        seed=seed * 1000 + b,
                    )
                    metrics.append(_score(policy_cfg, suite, forest, clock, seed))
            history.extend(raw.records)
            retrain = config.retrain and b % config.retrain_every == 0
            if retrain:
                forest, params = _train(history, config.hyper, seed + b)
                version += 1
            classes: dict[str, int] = {}
            for fault in raw.faults.faults:
                name = world.class_of(location[fault])
                classes[name] = classes.get(name, 0) + 1
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(f"build {b}: {exc}") from exc
        if replaying:
            continue
        entry = BuildLog(event, metrics, retrain, version, classes, len(raw.records))
        result.builds.append(entry)
        if path is not None:
            with path.open("a") as fh:
                fh.write(entry.to_json() + "\n")
        log.debug("build %d: %d tests, retrain=%s", b, len(raw.records), retrain)
    return result


def load_pipeline_log(path: str | Path) -> list[dict]:
    return _read_jsonl(Path(path))


# ---------------------------------------------------------------- drift check

@dataclass(frozen=True)
class DriftReport:
    before_mean: float
    after_mean: float
    delta: float
    p_value: float
    window: int


def drift_check(
    log_or_entries: PipelineLog | Sequence[dict],
    policy: str = "quantum_enhanced",
    window: int = 5,
) -> DriftReport:
    """Compare the first ``window`` builds (initial model) with the last ``window``."""
    if isinstance(log_or_entries, PipelineLog):
        series = log_or_entries.apfd_series(policy)
    else:
        series = [m["apfd"] for e in log_or_entries for m in e["metrics"] if m["policy"] == policy]
    if len(series) < max(10, 2 * window):
        raise InsufficientBuilds(f"need at least {max(10, 2 * window)} builds, got {len(series)}")
    before, after = series[:window], series[-window:]
    return DriftReport(
        float(np.mean(before)),
        float(np.mean(after)),
        float(np.mean(after) - np.mean(before)),
        paired_significance(after, before),
        window,
    )
