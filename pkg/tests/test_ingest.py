import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qprior.ingest import (
    CSV_COLUMNS,
    AllMissingColumn,
    ConfigError,
    Dataset,
    KTooLarge,
    ParseError,
    SchemaError,
    SplitSpec,
    SyntheticConfig,
    SyntheticWorld,
    apply_normalize,
    drop_low_coverage,
    dump_csv,
    dump_json,
    fit_normalize,
    fit_params,
    generate_synthetic_suite,
    impute_missing,
    kfold_partition,
    load_dataset,
    mean_pairwise_jaccard,
    parse_csv,
    parse_json,
    stratified_fold_indices,
    stratified_split,
    stratified_split_indices,
)
from qprior.model import MISSING, Suite

from conftest import make_record

HEADER = ",".join(CSV_COLUMNS)


def _dataset(records) -> Dataset:
    return Dataset.single(Suite.from_records("s", records))


def _column(ds: Dataset, name: str) -> list:
    return [r.features[name] for r in ds.records]


class TestLoading:
    def test_three_rows(self, tmp_path):
        path = tmp_path / "suite.csv"
        path.write_text(
            HEADER + "\n"
            "t1,1,2,3,4,0.5,0.4,0.9,a;b,f1\n"
            "t2,1,2,3,4,0.5,0.4,,b,\n"
            "t3,1,2,3,4,0.5,0.4,0.1,,\n"
        )
        ds = load_dataset(path)
        assert [r.id for r in ds.records] == ["t1", "t2", "t3"]
        assert ds.records[0].coverage == {"a", "b"}
        assert ds.records[0].detects == {"f1"}
        assert ds.records[1].features["mutation_kill_score"] is MISSING

    def test_misspelled_column_named(self):
        with pytest.raises(SchemaError) as err:
            parse_csv(HEADER.replace("exec_time", "exec_tmie") + "\n")
        assert "exec_tmie" in err.value.columns

    def test_parse_error_reports_line(self):
        with pytest.raises(ParseError) as err:
            parse_csv(HEADER + "\nt1,x,2,3,4,0.5,0.4,0.9,a,\n")
        assert err.value.line == 2
        assert err.value.column == "cyclomatic_complexity"

    def test_negative_time_is_parse_error(self):
        with pytest.raises(ParseError):
            parse_csv(HEADER + "\nt1,1,2,3,-4,0.5,0.4,0.9,a,\n")

    def test_csv_json_round_trip(self, tiny_suite):
        recs = list(tiny_suite.records)
        assert parse_csv(dump_csv(recs)) == recs
        assert parse_json(dump_json(recs)) == recs

    def test_missing_exec_time_is_nan_then_imputed(self):
        recs = parse_csv(HEADER + "\nt1,1,2,3,,0.5,0.4,0.9,a,\nt2,1,2,3,4,0.5,0.4,0.9,a,\n")
        assert math.isnan(recs[0].exec_time)
        filled = impute_missing(_dataset(recs)).records[0]
        assert filled.exec_time == 4.0

    def test_unknown_format(self, tmp_path):
        path = tmp_path / "x.txt"
        path.write_text("")
        with pytest.raises(SchemaError):
            load_dataset(path)


class TestImpute:
    def test_mean_fill(self):
        recs = [make_record(f"t{i}", code_churn=v) for i, v in enumerate([1.0, MISSING, 3.0])]
        assert _column(impute_missing(_dataset(recs)), "code_churn") == [1.0, 2.0, 3.0]

    def test_no_missing_unchanged(self, tiny_suite):
        ds = Dataset.single(tiny_suite)
        assert impute_missing(ds).records == ds.records

    def test_all_missing_column(self):
        recs = [make_record(f"t{i}", code_churn=MISSING) for i in range(2)]
        with pytest.raises(AllMissingColumn) as err:
            impute_missing(_dataset(recs))
        assert err.value.feature == "code_churn"

    @given(st.lists(st.one_of(st.none(), st.floats(-100, 100)), min_size=1, max_size=12))
    def test_idempotent(self, values):
        if all(v is None for v in values):
            values[0] = 1.0
        recs = [make_record(f"t{i}", code_churn=v) for i, v in enumerate(values)]
        once = impute_missing(_dataset(recs))
        assert impute_missing(once).records == once.records


class TestCoverageFilter:
    def test_min_zero_identity(self, tiny_suite):
        ds = Dataset.single(tiny_suite)
        assert drop_low_coverage(ds, 0) == (ds, 0)

    def test_drops_small(self):
        recs = [make_record("a"), make_record("b", {"x", "y"}), make_record("c", set("vwxyz"))]
        out, dropped = drop_low_coverage(_dataset(recs), 1)
        assert dropped == 1 and [r.id for r in out.records] == ["b", "c"]

    def test_fault_becomes_undetectable(self):
        recs = [make_record("a", detects={"f1"}), make_record("b", {"x"}, detects={"f2"})]
        out, _ = drop_low_coverage(_dataset(recs), 1)
        suite = out.suites[0]
        assert suite.faults.faults == ("f2",)
        assert suite.faults.dropped == 1
        assert suite.validate().valid


class TestNormalize:
    def test_min_max(self):
        recs = [make_record(f"t{i}", code_churn=v) for i, v in enumerate([0.0, 5.0, 10.0])]
        assert _column(fit_normalize(_dataset(recs)), "code_churn") == [0.0, 0.5, 1.0]

    def test_constant_column(self):
        recs = [make_record(f"t{i}", code_churn=7.0) for i in range(3)]
        assert _column(fit_normalize(_dataset(recs)), "code_churn") == [0.0, 0.0, 0.0]

    def test_unseen_value_not_clamped(self):
        fit = _dataset([make_record("a", code_churn=0.0), make_record("b", code_churn=10.0)])
        unseen = _dataset([make_record("c", code_churn=20.0)])
        assert _column(fit_normalize(unseen, fit_on=fit), "code_churn") == [2.0]

    def test_params_stored(self, tiny_suite):
        ds = fit_normalize(Dataset.single(tiny_suite))
        assert set(ds.normalization_params) == set(ds.feature_names)
        assert all(lo <= hi for lo, hi in ds.normalization_params.values())

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=20))
    def test_in_fit_range(self, values):
        recs = [make_record(f"t{i}", code_churn=v) for i, v in enumerate(values)]
        X, _ = fit_normalize(_dataset(recs)).to_arrays()
        assert np.all((X >= 0.0) & (X <= 1.0 + 1e-12))

    def test_missing_params_rejected(self, tiny_suite):
        with pytest.raises(SchemaError):
            apply_normalize(Dataset.single(tiny_suite), {"code_churn": (0.0, 1.0)})


def _labelled(n_pos: int, n_neg: int) -> Dataset:
    recs = [make_record(f"p{i}", detects={"f"}) for i in range(n_pos)]
    recs += [make_record(f"n{i}") for i in range(n_neg)]
    return _dataset(recs)


class TestSplit:
    def test_exact_proportions(self):
        train, test = stratified_split(_labelled(5, 5), SplitSpec(0.8, seed=1))
        assert sum(r.label for r in train.records) == 4 and len(train) == 8
        assert sum(r.label for r in test.records) == 1 and len(test) == 2

    def test_deterministic(self):
        ds = _labelled(7, 13)
        a = stratified_split(ds, SplitSpec(seed=9))
        b = stratified_split(ds, SplitSpec(seed=9))
        assert [r.id for r in a[1].records] == [r.id for r in b[1].records]

    def test_hundred_records_ten_percent_positive(self):
        _, test = stratified_split(_labelled(10, 90), SplitSpec(0.8, seed=0))
        assert len(test) == 20
        assert sum(r.label for r in test.records) == 2

    def test_thousand_records_ten_percent_positive(self):
        labels = [1] * 100 + [0] * 900
        _, test = stratified_split_indices(labels, 0.8, seed=0)
        assert len(test) == 200
        assert sum(labels[i] for i in test) == 20

    def test_invalid_fraction(self):
        with pytest.raises(ConfigError):
            SplitSpec(1.0)

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=60), st.integers(0, 2**32 - 1))
    def test_partition(self, labels, seed):
        train, test = stratified_split_indices(labels, 0.8, seed)
        assert sorted(train + test) == list(range(len(labels)))
        for c in (0, 1):
            members = sum(1 for y in labels if y == c)
            assert sum(1 for i in test if labels[i] == c) == math.floor(members * 0.2 + 1e-9)


class TestKFold:
    def test_even(self):
        folds = kfold_partition(_labelled(5, 5), 5, seed=0)
        assert [len(f) for f in folds] == [2] * 5

    def test_remainder(self):
        folds = stratified_fold_indices([1] * 4 + [0] * 7, 5, seed=0)
        assert sorted((len(f) for f in folds), reverse=True) == [3, 2, 2, 2, 2]

    def test_too_large(self):
        with pytest.raises(KTooLarge):
            stratified_fold_indices([0, 1, 0], 4, seed=0)

    @given(st.lists(st.integers(0, 1), min_size=5, max_size=50), st.integers(2, 5), st.integers(0, 1000))
    def test_partition_property(self, labels, k, seed):
        folds = stratified_fold_indices(labels, k, seed)
        flat = np.concatenate(folds)
        assert sorted(flat.tolist()) == list(range(len(labels)))
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1


class TestSynthetic:
    def test_forced_single_detection(self):
        recs, fm = generate_synthetic_suite(
            SyntheticConfig(n_tests=1, n_faults=1, redundancy=0.0, kill_score=1.0, seed=3)
        )
        assert len(recs) == 1 and fm.m == 1
        assert recs[0].detects == set(fm.faults)

    def test_deterministic(self):
        cfg = SyntheticConfig(n_tests=30, n_faults=8, seed=11)
        assert dump_csv(generate_synthetic_suite(cfg)[0]) == dump_csv(generate_synthetic_suite(cfg)[0])

    def test_redundancy_raises_overlap(self):
        high, _ = generate_synthetic_suite(SyntheticConfig(n_tests=100, redundancy=0.8, seed=2))
        low, _ = generate_synthetic_suite(SyntheticConfig(n_tests=100, redundancy=0.0, seed=2))
        assert mean_pairwise_jaccard(high) > mean_pairwise_jaccard(low)

    def test_every_fault_detectable(self):
        recs, fm = generate_synthetic_suite(SyntheticConfig(n_tests=40, n_faults=15, seed=5))
        assert fm.dropped == 0 and fm.m == 15
        assert all(any(row[j] for row in fm.rows.values()) for j in range(fm.m))

    def test_churn_correlates_with_label(self):
        churn, labels = [], []
        for seed in range(10):
            recs, _ = generate_synthetic_suite(SyntheticConfig(n_tests=100, seed=seed))
            churn += [r.features["code_churn"] for r in recs]
            labels += [float(r.label) for r in recs]
        assert np.corrcoef(churn, labels)[0, 1] > 0

    @pytest.mark.parametrize(
        "kwargs", [{"n_tests": 0}, {"redundancy": 1.5}, {"fault_skew": 0.0}, {"kill_score": 2.0}]
    )
    def test_config_errors(self, kwargs):
        with pytest.raises(ConfigError):
            SyntheticConfig(**kwargs)

    def test_world_mutation_and_drift(self):
        world = SyntheticWorld(SyntheticConfig(n_tests=20, n_faults=5, seed=1))
        new = world.add_test()
        world.remove_test("t0000")
        ids = [t.id for t in world.tests]
        assert new in ids and "t0000" not in ids
        before = world.churn.copy()
        world.drift(0.5)
        assert not np.allclose(before, world.churn)
        assert any(v != 0.0 for v in world.feature_bias.values())

    def test_exec_time_matches_feature(self):
        recs, _ = generate_synthetic_suite(SyntheticConfig(n_tests=20, seed=4))
        assert all(r.exec_time == r.features["exec_time"] for r in recs)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_valid_suites(self, seed):
        world = SyntheticWorld(SyntheticConfig(n_tests=15, n_faults=4, seed=seed))
        suite, location = world.draw_suite()
        assert suite.validate().valid
        assert set(location) == set(suite.faults.faults)
