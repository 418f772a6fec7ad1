"""Command-line entry point: ``qprior <command> [options]``.

Options can also come from a JSON object passed with ``--config``; keys use
the option names with underscores (``lambda_r``), and explicit flags win over
file values. Exit status is 0 on success, 1 on usage errors and 2 on data
errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .anneal import SOLVERS, AnnealSchedule, SolverError
from .evaluate import EvaluationError, metrics_to_csv
from .ingest import (
    Dataset,
    IngestError,
    SplitSpec,
    SyntheticConfig,
    SyntheticWorld,
    apply_normalize,
    dump_csv,
    dump_json,
    fit_params,
    load_dataset,
    preprocess,
    stratified_split,
)
from .learner import (
    Forest,
    HyperParams,
    LearnerError,
    classification_metrics,
    default_grid,
    feature_importance,
    forest_from_json,
    forest_to_json,
    grid_search_cv,
    predict_matrix,
    rfe_select,
    train_forest,
)
from .model import POLICIES, ModelError, Suite
from .pipeline import (
    BENCH_HYPER,
    TUNED_QUBO,
    BenchConfig,
    InsufficientBuilds,
    PipelineError,
    SimulationConfig,
    drift_check,
    run_benchmark,
    run_simulation,
)
from .prioritize import PolicyConfig, PrioritizeError, run_policy
from .qubo import QuboConfig, QuboError
from .report import FIGURES, ReportError, emit_figures, emit_table1

log = logging.getLogger("qprior")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

DATA_ERRORS = (
    IngestError, ModelError, LearnerError, QuboError, SolverError, PrioritizeError,
    EvaluationError, PipelineError, ReportError, OSError, json.JSONDecodeError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with status 2
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# Built-in values used when neither a flag nor the config file supplies one.
DEFAULTS: dict[str, dict[str, Any]] = {
    "generate": {"n_tests": 100, "n_faults": 25, "redundancy": 0.3, "format": "csv"},
    "train": {"format": None, "k": 5, "features": None, "train_fraction": 0.8, "grid": "default"},
    "prioritize": {
        "format": None, "forest": None, "policy": "quantum_enhanced", "solver": "sa",
        "lambda_r": TUNED_QUBO.lambda_r, "lambda_t": TUNED_QUBO.lambda_t, "batch_size": None,
        "sweeps": AnnealSchedule.sweeps, "restarts": AnnealSchedule.restarts, "greedy_key": "coverage_desc",
    },
    "bench": {
        "seeds": 30, "sizes": "medium", "policy": ",".join(POLICIES), "solver": "sa",
        "lambda_r": TUNED_QUBO.lambda_r, "lambda_t": TUNED_QUBO.lambda_t, "batch_size": None,
        "sweeps": AnnealSchedule.sweeps, "restarts": AnnealSchedule.restarts,
    },
    "simulate": {
        "builds": 15, "retrain_every": 5, "no_retrain": False, "resume": False,
        "n_tests": SimulationConfig.n_tests, "drift": SimulationConfig.drift,
        "policy": ",".join(POLICIES), "solver": "sa",
        "lambda_r": TUNED_QUBO.lambda_r, "lambda_t": TUNED_QUBO.lambda_t, "batch_size": None,
        "sweeps": SimulationConfig.schedule.sweeps, "restarts": SimulationConfig.schedule.restarts,
    },
    "report": {"log": None, "figures": ",".join(FIGURES)},
}


def _qubo_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--solver", choices=SOLVERS)
    p.add_argument("--lambda-r", type=float, help="redundancy penalty weight")
    p.add_argument("--lambda-t", type=float, help="execution time penalty weight")
    p.add_argument("--batch-size", type=int, help="largest sub-problem handed to the solver")
    p.add_argument("--sweeps", type=int)
    p.add_argument("--restarts", type=int)


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="global seed (fallback: $QPRIOR_SEED, then 0)")
    common.add_argument("--out", help="output path (stdout when omitted, where applicable)")
    common.add_argument("--config", help="JSON file with option values")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="qprior", description="ML + QUBO test case prioritization.")
    parser.add_argument("--version", action="version", version=f"qprior {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic test suite")
    p.add_argument("--n-tests", type=int)
    p.add_argument("--n-faults", type=int)
    p.add_argument("--redundancy", type=float)
    p.add_argument("--format", choices=("csv", "json"))

    p = sub.add_parser("train", parents=[common], help="grid search, RFE and a final forest")
    p.add_argument("data", help="suite file (csv or json)")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--k", type=int, help="cross-validation folds")
    p.add_argument("--features", type=int, help="keep this many features via RFE")
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--grid", choices=("default", "bench"))

    p = sub.add_parser("prioritize", parents=[common], help="order one suite with one policy")
    p.add_argument("data", help="suite file (csv or json)")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--forest", help="model bundle from `train`; trains in-sample when omitted")
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--greedy-key", choices=("coverage_desc", "time_asc"))
    _qubo_flags(p)

    p = sub.add_parser("bench", parents=[common], help="all policies over seeds and suite sizes")
    p.add_argument("--seeds", type=int, help="number of seeds, starting at --seed")
    p.add_argument("--sizes", help="comma list of small, medium, large or test counts")
    p.add_argument("--policy", help="comma list of policies")
    _qubo_flags(p)

    p = sub.add_parser("simulate", parents=[common], help="stream of CI builds")
    p.add_argument("--builds", type=int)
    p.add_argument("--retrain-every", type=int)
    p.add_argument("--no-retrain", action="store_true", default=None)
    p.add_argument("--resume", action="store_true", default=None)
    p.add_argument("--n-tests", type=int)
    p.add_argument("--drift", type=float)
    p.add_argument("--policy", help="comma list of policies")
    _qubo_flags(p)

    p = sub.add_parser("report", parents=[common], help="Table I and figures from a metrics CSV")
    p.add_argument("metrics", help="metrics CSV written by `bench`")
    p.add_argument("--log", help="pipeline JSON-lines log (needed for fig2)")
    p.add_argument("--figures", help="comma list of figures")
    return parser


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Merge built-in defaults, the config file and explicit flags, in that order."""
    command = args.command
    values = dict(DEFAULTS[command])
    values.update(out=None)
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        allowed = set(values) | {"seed"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        values.update(data)
    for key, value in vars(args).items():
        if key in ("command", "config", "verbose"):
            continue
        if value is not None:
            values[key] = value
    if values.get("seed") is None:
        env = os.environ.get("QPRIOR_SEED")
        try:
            values["seed"] = int(env) if env is not None else 0
        except ValueError:
            raise UsageError(f"QPRIOR_SEED must be an integer, got {env!r}") from None
    return values


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _policies(value: str) -> tuple[str, ...]:
    names = tuple(p.strip() for p in str(value).split(",") if p.strip())
    unknown = [p for p in names if p not in POLICIES]
    if unknown or not names:
        raise UsageError(f"unknown policies {unknown}; choose from {', '.join(POLICIES)}")
    return names


def _qubo(v: dict) -> QuboConfig:
    return QuboConfig(lambda_r=float(v["lambda_r"]), lambda_t=float(v["lambda_t"]), batch_size=v["batch_size"])


def _schedule(v: dict, seed: int) -> AnnealSchedule:
    return AnnealSchedule(sweeps=int(v["sweeps"]), restarts=int(v["restarts"]), seed=seed)


# ------------------------------------------------------------------ commands

def cmd_generate(v: dict) -> int:
    world = SyntheticWorld(
        SyntheticConfig(
            n_tests=int(v["n_tests"]), n_faults=int(v["n_faults"]),
            n_code_elements=3 * int(v["n_tests"]), redundancy=float(v["redundancy"]), seed=v["seed"],
        )
    )
    suite, _ = world.draw_suite()
    _emit(dump_json(suite.records) if v["format"] == "json" else dump_csv(suite.records), v["out"])
    return EXIT_OK


def _load(v: dict) -> Dataset:
    data, dropped = preprocess(load_dataset(v["data"], v.get("format")))
    if dropped:
        log.warning("dropped %d tests without coverage", dropped)
    return data


def cmd_train(v: dict) -> int:
    data = _load(v)
    seed = v["seed"]
    train, test = stratified_split(data, SplitSpec(float(v["train_fraction"]), seed))
    params = fit_params(train)
    train, test = apply_normalize(train, params), apply_normalize(test, params)
    grid = default_grid() if v["grid"] == "default" else [BENCH_HYPER]
    k = int(v["k"])
    best, table = grid_search_cv(train, grid, k, seed)
    survivors = train.feature_names
    eliminated: tuple[str, ...] = ()
    if v["features"] is not None:
        rfe = rfe_select(train, best, int(v["features"]), k, seed)
        survivors, eliminated = rfe.survivors, rfe.eliminated
    train, test = train.select_features(survivors), test.select_features(survivors)
    forest = train_forest(train, best, seed)
    X_test, y_test = test.to_arrays()
    report = classification_metrics(predict_matrix(forest, X_test), y_test) if len(y_test) else None
    bundle = {
        "forest": json.loads(forest_to_json(forest)),
        "normalization": {name: list(params[name]) for name in survivors},
        "grid": [cell.as_row() for cell in table],
        "best": asdict(best),
        "eliminated": list(eliminated),
        "importance": feature_importance(forest),
        "test_report": asdict(report) if report is not None else None,
    }
    text = json.dumps(bundle, indent=2, sort_keys=True) + "\n"
    _emit(text, v["out"])
    if v["out"] and report is not None:
        auc = "n/a" if report.roc_auc is None else f"{report.roc_auc:.3f}"
        print(f"held-out F1 {report.f1:.3f}, ROC-AUC {auc}; best {asdict(best)}", file=sys.stderr)
    return EXIT_OK


def load_bundle(path: str | Path) -> tuple[Forest, dict | None]:
    data = json.loads(Path(path).read_text())
    if "forest" in data:
        forest = forest_from_json(json.dumps(data["forest"]))
        stored = data.get("normalization", {})
        # the bundle is written with sorted keys; restore the forest's column order
        params = {k: tuple(stored[k]) for k in forest.feature_names if k in stored} or None
        return forest, params
    return forest_from_json(json.dumps(data)), None


def cmd_prioritize(v: dict) -> int:
    data = _load(v)
    seed = v["seed"]
    forest = None
    if v["policy"] in ("ml_only", "quantum_enhanced"):
        if v["forest"]:
            forest, params = load_bundle(v["forest"])
            if params is not None:
                data = apply_normalize(data.select_features(list(params)), params)
        else:
            params = fit_params(data)
            data = apply_normalize(data, params)
            forest = train_forest(data, BENCH_HYPER, seed)
    suite: Suite = data.suites[0]
    config = PolicyConfig(
        policy=v["policy"], greedy_key=v["greedy_key"], qubo_config=_qubo(v),
        solver_kind=v["solver"], schedule=_schedule(v, seed), seed=seed,
    )
    run = run_policy(suite, config, forest)
    _emit(run.ordering.to_json(suite.suite_id, seed), v["out"])
    return EXIT_OK


def _sizes(value) -> list[str | int]:
    out: list[str | int] = []
    for token in str(value).split(","):
        token = token.strip()
        if not token:
            continue
        if token.isdigit():
            out.append(int(token))
        elif token in ("small", "medium", "large"):
            out.append(token)
        else:
            raise UsageError(f"unknown suite size {token!r}")
    return out


def cmd_bench(v: dict) -> int:
    seed = v["seed"]
    config = BenchConfig(
        policies=_policies(v["policy"]), qubo_config=_qubo(v), solver_kind=v["solver"],
        schedule=_schedule(v, seed),
    )
    n_seeds = int(v["seeds"])
    if n_seeds < 1:
        raise UsageError("--seeds must be at least 1")
    metrics = run_benchmark(range(seed, seed + n_seeds), _sizes(v["sizes"]), config)
    _emit(metrics_to_csv(metrics), v["out"])
    return EXIT_OK


def cmd_simulate(v: dict) -> int:
    seed = v["seed"]
    config = SimulationConfig(
        n_tests=int(v["n_tests"]), n_faults=max(3, int(v["n_tests"]) // 4), drift=float(v["drift"]),
        retrain_every=int(v["retrain_every"]), retrain=not v["no_retrain"],
        policies=_policies(v["policy"]), qubo_config=_qubo(v), solver_kind=v["solver"],
        schedule=_schedule(v, seed),
    )
    if v["resume"] and not v["out"]:
        raise UsageError("--resume needs --out")
    result = run_simulation(int(v["builds"]), seed, config, log_path=v["out"], resume=bool(v["resume"]))
    if not v["out"]:
        sys.stdout.write(result.to_jsonl())
    if "quantum_enhanced" in config.policies:
        try:
            drift = drift_check(result, window=config.retrain_every)
            print(
                f"quantum_enhanced APFD first {drift.window} builds {drift.before_mean:.4f}, "
                f"last {drift.window} {drift.after_mean:.4f} (p={drift.p_value:.3g})",
                file=sys.stderr,
            )
        except InsufficientBuilds:
            pass
    return EXIT_OK


def cmd_report(v: dict) -> int:
    out = Path(v["out"] or "report")
    out.mkdir(parents=True, exist_ok=True)
    metrics = Path(v["metrics"])
    table = emit_table1(metrics)
    (out / "table1.txt").write_text(table.to_text())
    (out / "table1.csv").write_text(table.to_csv())
    entries = None
    if v["log"]:
        entries = [json.loads(line) for line in Path(v["log"]).read_text().splitlines() if line.strip()]
    names = [f.strip() for f in str(v["figures"]).split(",") if f.strip()]
    unknown = [f for f in names if f not in FIGURES]
    if unknown:
        raise UsageError(f"unknown figures {unknown}")
    emit_figures(metrics, entries, out, names)
    sys.stdout.write(table.to_text())
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "prioritize": cmd_prioritize,
    "bench": cmd_bench,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        values = resolve(args)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            return COMMANDS[args.command](values)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"qprior: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TypeError, ValueError) as exc:
        # Bad option values that only surface when a config object is built.
        print(f"qprior: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
