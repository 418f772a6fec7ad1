import json
from dataclasses import replace

import numpy as np
import pytest

from qprior.anneal import AnnealSchedule
from qprior.evaluate import LEDGER_COMPONENTS
from qprior.learner import HyperParams
from qprior.model import POLICIES
from qprior.pipeline import (
    BenchConfig,
    InsufficientBuilds,
    PipelineError,
    SimulationConfig,
    benchmark_case,
    commit_id,
    drift_check,
    faults_for,
    load_pipeline_log,
    run_benchmark,
    run_simulation,
)
from qprior.timing import VirtualClock

QUICK = SimulationConfig(
    n_tests=20, n_faults=5, hyper=HyperParams(n_trees=8, max_depth=4, min_samples_leaf=3),
    schedule=AnnealSchedule(sweeps=200, restarts=1),
)
QUICK_BENCH = BenchConfig(
    hyper=HyperParams(n_trees=10, max_depth=4, min_samples_leaf=3),
    schedule=AnnealSchedule(sweeps=200, restarts=1),
)


@pytest.fixture(scope="module")
def log15():
    return run_simulation(15, seed=2, config=QUICK, clock=VirtualClock())


class TestBenchmark:
    def test_faults_for(self):
        assert faults_for(100) == 25 and faults_for(8) == 3

    def test_case_rows(self):
        rows = benchmark_case(0, 20, config=QUICK_BENCH, clock=VirtualClock())
        assert [r.policy for r in rows] == list(POLICIES)
        assert all(r.n == 20 and r.m == 5 and r.suite_id == "n20-s0" for r in rows)
        assert all(0 < r.apfd <= 1 for r in rows)

    def test_baselines_carry_no_model_overhead(self):
        rows = {r.policy: r for r in benchmark_case(1, 20, config=QUICK_BENCH, clock=VirtualClock())}
        for policy in ("random", "greedy"):
            assert rows[policy].overhead.total == rows[policy].overhead.parse_order
        assert rows["quantum_enhanced"].overhead.solve > 0

    def test_run_benchmark_shape(self):
        rows = run_benchmark([0, 1], sizes=(20, 24), config=QUICK_BENCH, clock=VirtualClock())
        assert len(rows) == 4 * 2 * 2

    def test_deterministic(self):
        a = benchmark_case(3, 20, config=QUICK_BENCH, clock=VirtualClock())
        b = benchmark_case(3, 20, config=QUICK_BENCH, clock=VirtualClock())
        assert a == b


class TestSimulation:
    def test_short_run_never_retrains(self):
        log = run_simulation(4, seed=0, config=QUICK, clock=VirtualClock())
        assert log.retrain_builds() == []
        assert {b.forest_version for b in log.builds} == {1}

    def test_retrain_schedule(self, log15):
        assert log15.retrain_builds() == [5, 10, 15]
        assert [b.forest_version for b in log15.builds][4:6] == [2, 2]

    def test_no_retrain_flag(self):
        log = run_simulation(5, seed=0, config=replace(QUICK, retrain=False), clock=VirtualClock())
        assert log.retrain_builds() == []

    def test_commit_ids(self, log15):
        assert [b.event.commit_id for b in log15.builds] == [commit_id(2, b) for b in range(1, 16)]

    def test_ledger_sums(self, log15):
        for build in log15.builds:
            for m in build.metrics:
                assert abs(m.overhead.total - sum(m.overhead.components().values())) <= 1e-9

    def test_log_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        run_simulation(6, seed=5, config=QUICK, clock=VirtualClock(), log_path=a)
        run_simulation(6, seed=5, config=QUICK, clock=VirtualClock(), log_path=b)
        assert a.read_bytes() == b.read_bytes()
        entries = load_pipeline_log(a)
        assert len(entries) == 6 and entries[0]["build_number"] == 1
        assert set(entries[0]["ledger"]["quantum_enhanced"]) >= set(LEDGER_COMPONENTS)

    def test_resume_continues(self, tmp_path):
        full, part = tmp_path / "full.jsonl", tmp_path / "part.jsonl"
        run_simulation(6, seed=4, config=QUICK, clock=VirtualClock(), log_path=full)
        run_simulation(3, seed=4, config=QUICK, clock=VirtualClock(), log_path=part)
        tail = run_simulation(6, seed=4, config=QUICK, clock=VirtualClock(), log_path=part, resume=True)
        assert [b.event.build_number for b in tail.builds] == [4, 5, 6]

        def strip(entry):
            # timing ledgers depend on how far the virtual clock has advanced
            entry = dict(entry)
            entry.pop("ledger")
            entry["metrics"] = [{k: v for k, v in m.items() if not k.startswith("overhead")} for m in entry["metrics"]]
            return entry

        assert [strip(e) for e in load_pipeline_log(part)] == [strip(e) for e in load_pipeline_log(full)]

    def test_resume_mismatch(self, tmp_path):
        path = tmp_path / "log.jsonl"
        run_simulation(2, seed=1, config=QUICK, clock=VirtualClock(), log_path=path)
        with pytest.raises(PipelineError):
            run_simulation(3, seed=9, config=QUICK, clock=VirtualClock(), log_path=path, resume=True)

    def test_errors_are_wrapped(self):
        with pytest.raises(PipelineError, match="build 1"):
            run_simulation(2, seed=0, config=replace(QUICK, qubo_config=None), clock=VirtualClock())

    def test_bad_config(self):
        with pytest.raises(PipelineError):
            SimulationConfig(retrain_every=0)
        with pytest.raises(PipelineError):
            SimulationConfig(policies=("oracle",))
        with pytest.raises(PipelineError):
            run_simulation(0)


class TestDriftCheck:
    def test_insufficient(self):
        log = run_simulation(5, seed=0, config=QUICK, clock=VirtualClock())
        with pytest.raises(InsufficientBuilds):
            drift_check(log)

    def test_from_entries(self, log15, tmp_path):
        report = drift_check(log15)
        path = tmp_path / "log.jsonl"
        path.write_text(log15.to_jsonl())
        assert drift_check(load_pipeline_log(path)) == report
        assert 0 < report.p_value <= 1 and report.window == 5

    def test_zero_drift_not_significant(self):
        log = run_simulation(12, seed=3, config=replace(QUICK, drift=0.0), clock=VirtualClock())
        report = drift_check(log)
        assert report.p_value > 0.05

    def test_retraining_helps_under_heavy_drift(self):
        cfg = replace(
            QUICK, n_tests=40, n_faults=10, drift=0.5, policies=("quantum_enhanced",),
            schedule=AnnealSchedule(sweeps=200, restarts=1),
        )
        on, off = [], []
        for seed in range(6):
            on.append(np.mean(run_simulation(12, seed, cfg, VirtualClock()).apfd_series("quantum_enhanced")[5:]))
            off.append(np.mean(run_simulation(12, seed, replace(cfg, retrain=False), VirtualClock())
                               .apfd_series("quantum_enhanced")[5:]))
        assert np.mean(on) > np.mean(off)
