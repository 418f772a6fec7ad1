"""Test orderings under the four policies: random, greedy, ML-only, QUBO-enhanced."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .anneal import EXHAUSTIVE_MAX_N, AnnealSchedule, solve
from .evaluate import OverheadLedger
from .learner import Forest, feature_matrix, predict_matrix
from .model import POLICIES, Ordering, Suite, TestCaseRecord
from .qubo import (
    QuboConfig,
    QuboModel,
    build_selection_qubo,
    decompose,
    merge_solutions,
    overlap_matrix,
    submodel,
)
from .timing import Clock, default_clock


class PrioritizeError(ValueError):
    pass


class EmptySuite(PrioritizeError):
    pass


GREEDY_KEYS = ("coverage_desc", "time_asc")


@dataclass(frozen=True)
class PolicyConfig:
    policy: str = "quantum_enhanced"
    greedy_key: str = "coverage_desc"
    qubo_config: QuboConfig = field(default_factory=QuboConfig)
    solver_kind: str = "sa"
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise PrioritizeError(f"unknown policy {self.policy!r}")
        if self.greedy_key not in GREEDY_KEYS:
            raise PrioritizeError(f"unknown greedy key {self.greedy_key!r}")


@dataclass(frozen=True)
class PolicyRun:
    ordering: Ordering
    ledger: OverheadLedger
    rounds: int = 0
    probabilities: dict[str, float] = field(default_factory=dict, compare=False)


def _records(suite: Suite | Sequence[TestCaseRecord]) -> list[TestCaseRecord]:
    records = list(suite.records if isinstance(suite, Suite) else suite)
    if not records:
        raise EmptySuite("cannot prioritize an empty suite")
    return records


def prioritize_random(suite: Suite | Sequence[TestCaseRecord], seed: int) -> Ordering:
    records = _records(suite)
    order = np.random.default_rng(seed).permutation(len(records))
    sequence = tuple(records[i].id for i in order)
    return Ordering(sequence, sequence, "random")


def prioritize_greedy(suite: Suite | Sequence[TestCaseRecord], key: str = "coverage_desc") -> Ordering:
    records = _records(suite)
    if key == "coverage_desc":
        ranked = sorted(records, key=lambda r: (-len(r.coverage), r.exec_time, r.id))
    elif key == "time_asc":
        ranked = sorted(records, key=lambda r: (r.exec_time, -len(r.coverage), r.id))
    else:
        raise PrioritizeError(f"unknown greedy key {key!r}")
    sequence = tuple(r.id for r in ranked)
    return Ordering(sequence, sequence, "greedy")


def _by_probability(records: Sequence[TestCaseRecord], p: dict[str, float]) -> list[TestCaseRecord]:
    return sorted(records, key=lambda r: (-p[r.id], r.exec_time, r.id))


def predict_suite(
    forest: Forest, records: Sequence[TestCaseRecord], clock: Clock = default_clock
) -> tuple[dict[str, float], OverheadLedger]:
    t0 = clock()
    X = feature_matrix(forest, records)
    t1 = clock()
    p = predict_matrix(forest, X)
    t2 = clock()
    probs = {r.id: float(v) for r, v in zip(records, p)}
    return probs, OverheadLedger(feature_extraction=t1 - t0, prediction=t2 - t1)


def prioritize_ml_only(
    suite: Suite | Sequence[TestCaseRecord],
    forest: Forest,
    probabilities: dict[str, float] | None = None,
) -> Ordering:
    records = _records(suite)
    p = probabilities if probabilities is not None else predict_suite(forest, records)[0]
    sequence = tuple(r.id for r in _by_probability(records, p))
    return Ordering(sequence, sequence, "ml_only")


def _normalized_times(records: Sequence[TestCaseRecord]) -> np.ndarray:
    times = np.array([r.exec_time for r in records], dtype=float)
    lo, hi = times.min(), times.max()
    if hi <= lo:
        return np.zeros_like(times)
    return (times - lo) / (hi - lo)


def solve_selection(
    model: QuboModel,
    config: PolicyConfig,
    round_index: int = 0,
    clock: Clock = default_clock,
) -> tuple[list[int], float, float]:
    """Solve one selection QUBO; returns bits, solve seconds and serialize seconds.

    With nonnegative couplings a variable whose linear weight is nonnegative
    never lowers the energy by switching on, so it is fixed to 0 first. The
    rest is decomposed into blocks no larger than the batch size.
    """
    bits = [0] * model.n
    if all(v >= 0 for v in model.quadratic.values()):
        free = [i for i, v in enumerate(model.linear) if v < 0]
    else:
        free = list(range(model.n))
    if not free:
        return bits, 0.0, 0.0
    reduced = submodel(model, free)
    max_vars = config.qubo_config.effective_batch(model.n)
    if config.solver_kind == "exhaustive":
        max_vars = min(max_vars, EXHAUSTIVE_MAX_N)
    solve_time = serialize_time = 0.0
    solved = []
    for k, sub in enumerate(decompose(reduced, max_vars)):
        schedule = AnnealSchedule(
            config.schedule.t_start,
            config.schedule.t_end,
            config.schedule.sweeps,
            config.schedule.restarts,
            config.schedule.seed + 1009 * round_index + 31 * k,
        )
        result = solve(sub.model, config.solver_kind, schedule, clock)
        solve_time += result.wall_time - result.serialize_time
        serialize_time += result.serialize_time
        solved.append((sub, result.assignment))
    merged, _ = merge_solutions(solved, reduced)
    for i, b in zip(free, merged):
        bits[i] = b
    return bits, solve_time, serialize_time


def prioritize_quantum(
    suite: Suite | Sequence[TestCaseRecord],
    forest: Forest,
    config: PolicyConfig = PolicyConfig(),
    clock: Clock = default_clock,
    probabilities: dict[str, float] | None = None,
) -> PolicyRun:
    """Order tests by repeated QUBO selection rounds.

    Each round solves a selection QUBO over the unscheduled tests, with overlap
    against already-scheduled tests charged on the linear terms, and appends
    the chosen tests by descending predicted probability. Round one's choice
    is reported as the selected subset.
    """
    records = _records(suite)
    ledger = OverheadLedger()
    if probabilities is None:
        probabilities, ledger = predict_suite(forest, records, clock)
    qcfg = config.qubo_config
    t0 = clock()
    overlap = overlap_matrix(records, qcfg.overlap_kind)
    build_time = clock() - t0
    solve_time = serialize_time = order_time = 0.0

    remaining = list(range(len(records)))
    scheduled: list[int] = []
    sequence: list[str] = []
    selected: tuple[str, ...] = ()
    rounds = 0
    while remaining:
        t0 = clock()
        rem = [records[i] for i in remaining]
        p = np.array([probabilities[r.id] for r in rem])
        block = overlap[np.ix_(remaining, remaining)]
        carried = (
            qcfg.lambda_r * overlap[np.ix_(remaining, scheduled)].sum(axis=1)
            if scheduled else np.zeros(len(remaining))
        )
        model = build_selection_qubo(
            p, _normalized_times(rem), block, qcfg, [r.id for r in rem], carried
        )
        build_time += clock() - t0
        bits, s_time, x_time = solve_selection(model, config, rounds, clock)
        solve_time += s_time
        serialize_time += x_time

        t0 = clock()
        picked = [rem[k] for k, b in enumerate(bits) if b]
        if not picked:
            picked = _by_probability(rem, probabilities)[:1]
        picked = _by_probability(picked, probabilities)
        if rounds == 0:
            selected = tuple(r.id for r in picked)
        sequence.extend(r.id for r in picked)
        chosen = {r.id for r in picked}
        scheduled.extend(i for i in remaining if records[i].id in chosen)
        remaining = [i for i in remaining if records[i].id not in chosen]
        rounds += 1
        order_time += clock() - t0

    ledger = ledger + OverheadLedger(
        qubo_build=build_time, serialize_transfer=serialize_time,
        solve=solve_time, parse_order=order_time,
    )
    return PolicyRun(Ordering(tuple(sequence), selected, "quantum_enhanced"), ledger, rounds, probabilities)


def run_policy(
    suite: Suite | Sequence[TestCaseRecord],
    config: PolicyConfig,
    forest: Forest | None = None,
    clock: Clock = default_clock,
    probabilities: dict[str, float] | None = None,
) -> PolicyRun:
    """Dispatch to one policy and time it. Baselines charge only ordering time."""
    records = _records(suite)
    if config.policy in ("ml_only", "quantum_enhanced") and forest is None:
        raise PrioritizeError(f"policy {config.policy} needs a trained forest")
    if config.policy == "quantum_enhanced":
        return prioritize_quantum(records, forest, config, clock, probabilities)
    if config.policy == "ml_only":
        ledger = OverheadLedger()
        if probabilities is None:
            probabilities, ledger = predict_suite(forest, records, clock)
        t0 = clock()
        ordering = prioritize_ml_only(records, forest, probabilities)
        return PolicyRun(ordering, ledger + OverheadLedger(parse_order=clock() - t0), 0, probabilities)
    t0 = clock()
    if config.policy == "greedy":
        ordering = prioritize_greedy(records, config.greedy_key)
    else:
        ordering = prioritize_random(records, config.seed)
    return PolicyRun(ordering, OverheadLedger(parse_order=clock() - t0))
