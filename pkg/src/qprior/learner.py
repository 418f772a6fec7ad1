"""Random forest classifier written from scratch, with CV grid search and RFE."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
from scipy.stats import rankdata

from .ingest import Dataset, stratified_fold_indices
from .model import MISSING, TestCaseRecord


class LearnerError(ValueError):
    pass


class SingleClass(LearnerError):
    pass


class FeatureMismatch(LearnerError):
    pass


@dataclass(frozen=True)
class Leaf:
    positive_fraction: float
    n_samples: int


@dataclass(frozen=True)
class Split:
    feature_index: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"
    n_samples: int


TreeNode = Union[Leaf, Split]


@dataclass(frozen=True)
class HyperParams:
    n_trees: int = 100
    max_depth: int | None = 8
    min_samples_leaf: int = 1
    features_per_split: str | int = "sqrt"

    def __post_init__(self) -> None:
        if self.n_trees < 1 or self.min_samples_leaf < 1:
            raise LearnerError("n_trees and min_samples_leaf must be positive")
        if self.max_depth is not None and self.max_depth < 1:
            raise LearnerError("max_depth must be positive or None")
        fps = self.features_per_split
        if isinstance(fps, str):
            if fps not in ("sqrt", "all"):
                raise LearnerError(f"features_per_split must be 'sqrt', 'all' or an int, got {fps!r}")
        elif fps < 1:
            raise LearnerError("features_per_split must be positive")

    def n_candidates(self, n_features: int) -> int:
        fps = self.features_per_split
        if fps == "all":
            return n_features
        if fps == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        return min(int(fps), n_features)


def default_grid() -> list[HyperParams]:
    return [
        HyperParams(n_trees=t, max_depth=d, min_samples_leaf=m)
        for t, d, m in product((50, 100), (4, 8, None), (1, 5))
    ]


@dataclass(frozen=True)
class Forest:
    trees: tuple[TreeNode, ...]
    hyper: HyperParams
    feature_names: tuple[str, ...]
    seed: int

    def __post_init__(self) -> None:
        if not self.trees:
            raise LearnerError("a forest needs at least one tree")


# ----------------------------------------------------------------- single tree

def gini(positive: float, n: float) -> float:
    if n <= 0:
        return 0.0
    p = positive / n
    return 2.0 * p * (1.0 - p)


def _best_split(X: np.ndarray, y: np.ndarray, idx: np.ndarray, feature: int, min_leaf: int):
    xs = X[idx, feature]
    order = np.argsort(xs, kind="stable")
    xs, ys = xs[order], y[idx][order]
    n = len(xs)
    n_left = np.arange(1, n)
    pos_left = np.cumsum(ys)[:-1]
    pos_total = ys.sum()
    valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
    if not valid.any():
        return None
    n_right = n - n_left
    p_left = pos_left / n_left
    p_right = (pos_total - pos_left) / n_right
    cost = (n_left * 2 * p_left * (1 - p_left) + n_right * 2 * p_right * (1 - p_right)) / n
    cost = np.where(valid, cost, np.inf)
    k = int(np.argmin(cost))
    lo, hi = xs[k], xs[k + 1]
    threshold = (lo + hi) / 2.0
    if not lo <= threshold < hi:
        threshold = lo
    return float(cost[k]), float(threshold)


def train_tree(
    X: np.ndarray, y: np.ndarray, hyper: HyperParams, rng: np.random.Generator
) -> TreeNode:
    """Greedy CART on Gini impurity. Samples with x <= threshold go left."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise LearnerError("cannot train a tree on zero samples")
    n_features = X.shape[1]
    k = hyper.n_candidates(n_features)

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        n = len(idx)
        pos = int(y[idx].sum())
        leaf = Leaf(pos / n, n)
        if pos in (0, n) or n < 2 * hyper.min_samples_leaf:
            return leaf
        if hyper.max_depth is not None and depth >= hyper.max_depth:
            return leaf
        parent = gini(pos, n)
        best = None
        order = rng.permutation(n_features)
        for rank, f in enumerate(order):
            if rank >= k and best is not None:
                break
            found = _best_split(X, y, idx, int(f), hyper.min_samples_leaf)
            if found is not None and (best is None or found[0] < best[0]):
                best = (found[0], int(f), found[1])
        if best is None or best[0] >= parent - 1e-12:
            return leaf
        _, f, threshold = best
        go_left = X[idx, f] <= threshold
        return Split(f, threshold, grow(idx[go_left], depth + 1), grow(idx[~go_left], depth + 1), n)

    return grow(np.arange(len(y)), 0)


def _predict_tree(node: TreeNode, X: np.ndarray, idx: np.ndarray, out: np.ndarray) -> None:
    if isinstance(node, Leaf):
        out[idx] = node.positive_fraction
        return
    go_left = X[idx, node.feature_index] <= node.threshold
    if go_left.any():
        _predict_tree(node.left, X, idx[go_left], out)
    if not go_left.all():
        _predict_tree(node.right, X, idx[~go_left], out)


def tree_predict(node: TreeNode, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.empty(len(X))
    if len(X):
        _predict_tree(node, X, np.arange(len(X)), out)
    return out


# ---------------------------------------------------------------------- forest

def fit_forest(
    X: np.ndarray,
    y: np.ndarray,
    hyper: HyperParams,
    seed: int,
    feature_names: Sequence[str] | None = None,
) -> Forest:
    """Bootstrap-aggregated trees. Tree i draws from child stream i of ``seed``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(y) < 2:
        raise LearnerError("need at least two samples")
    if len(np.unique(y)) < 2:
        raise SingleClass("training labels contain a single class")
    if np.isnan(X).any():
        raise LearnerError("training features contain missing values")
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    if len(names) != X.shape[1]:
        raise FeatureMismatch(f"{len(names)} names for {X.shape[1]} columns")
    trees = []
    for child in np.random.SeedSequence(seed).spawn(hyper.n_trees):
        rng = np.random.default_rng(child)
        boot = rng.integers(0, len(y), len(y))
        trees.append(train_tree(X[boot], y[boot], hyper, rng))
    return Forest(tuple(trees), hyper, names, seed)


def train_forest(train: Dataset, hyper: HyperParams = HyperParams(), seed: int = 0) -> Forest:
    X, y = train.to_arrays()
    return fit_forest(X, y, hyper, seed, train.feature_names)


def predict_matrix(forest: Forest, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(forest.feature_names):
        raise FeatureMismatch(f"expected {len(forest.feature_names)} features, got {X.shape[1]}")
    total = np.zeros(len(X))
    for tree in forest.trees:
        total += tree_predict(tree, X)
    return total / len(forest.trees)


def feature_matrix(forest: Forest, records: Iterable[TestCaseRecord]) -> np.ndarray:
    rows = []
    for r in records:
        missing = [n for n in forest.feature_names if r.features.get(n, MISSING) is MISSING]
        if missing:
            raise FeatureMismatch(f"test {r.id!r} lacks features {missing}")
        rows.append([float(r.features[n]) for n in forest.feature_names])
    return np.array(rows, dtype=float).reshape(len(rows), len(forest.feature_names))


def predict_records(forest: Forest, records: Sequence[TestCaseRecord]) -> np.ndarray:
    return predict_matrix(forest, feature_matrix(forest, records))


def predict_proba(forest: Forest, features: Mapping[str, float] | TestCaseRecord) -> float:
    if isinstance(features, TestCaseRecord):
        features = features.features
    missing = [n for n in forest.feature_names if features.get(n, MISSING) is MISSING]
    if missing:
        raise FeatureMismatch(f"feature vector lacks {missing}")
    row = np.array([[float(features[n]) for n in forest.feature_names]])
    return float(predict_matrix(forest, row)[0])


# --------------------------------------------------------------------- metrics

@dataclass(frozen=True)
class EvalReport:
    precision: float
    recall: float
    f1: float
    roc_auc: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    undefined: tuple[str, ...] = ()


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Mann-Whitney rank statistic; tied scores earn half credit."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classification_metrics(
    scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5
) -> EvalReport:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if len(scores) == 0 or len(scores) != len(labels):
        raise LearnerError("need equally many scores and labels, at least one")
    predicted = scores >= threshold
    tp = int((predicted & labels).sum())
    fp = int((predicted & ~labels).sum())
    tn = int((~predicted & ~labels).sum())
    fn = int((~predicted & labels).sum())
    undefined = []
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        undefined.append("precision")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        undefined.append("recall")
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    auc = roc_auc(scores, labels)
    if auc is None:
        undefined.append("roc_auc")
    return EvalReport(precision, recall, f1, auc, tp, fp, tn, fn, tuple(undefined))


# ---------------------------------------------------------------- grid search

@dataclass(frozen=True)
class GridCell:
    hyper: HyperParams
    mean_f1: float
    mean_precision: float
    mean_recall: float
    mean_auc: float | None

    def as_row(self) -> dict:
        row = asdict(self.hyper)
        row.update(
            mean_f1=self.mean_f1,
            mean_precision=self.mean_precision,
            mean_recall=self.mean_recall,
            mean_auc=self.mean_auc,
        )
        return row


def cross_validate(
    X: np.ndarray, y: np.ndarray, hyper: HyperParams, k: int = 5, seed: int = 0
) -> list[EvalReport]:
    reports = []
    for fold in stratified_fold_indices(y, k, seed):
        held = np.zeros(len(y), dtype=bool)
        held[fold] = True
        forest = fit_forest(X[~held], y[~held], hyper, seed)
        reports.append(classification_metrics(predict_matrix(forest, X[held]), y[held]))
    return reports


def _summarize(hyper: HyperParams, reports: Sequence[EvalReport]) -> GridCell:
    aucs = [r.roc_auc for r in reports if r.roc_auc is not None]
    return GridCell(
        hyper,
        float(np.mean([r.f1 for r in reports])),
        float(np.mean([r.precision for r in reports])),
        float(np.mean([r.recall for r in reports])),
        float(np.mean(aucs)) if aucs else None,
    )


def _preference(position: int, cell: GridCell) -> tuple:
    depth = math.inf if cell.hyper.max_depth is None else cell.hyper.max_depth
    return (-cell.mean_f1, cell.hyper.n_trees, depth, -cell.hyper.min_samples_leaf, position)


def grid_search_arrays(
    X: np.ndarray, y: np.ndarray, grid: Sequence[HyperParams], k: int = 5, seed: int = 0
) -> tuple[HyperParams, list[GridCell]]:
    if not grid:
        raise LearnerError("empty hyperparameter grid")
    table = [_summarize(h, cross_validate(X, y, h, k, seed)) for h in grid]
    best = min(enumerate(table), key=lambda item: _preference(*item))[1]
    return best.hyper, table


def grid_search_cv(
    train: Dataset, grid: Sequence[HyperParams] | None = None, k: int = 5, seed: int = 0
) -> tuple[HyperParams, list[GridCell]]:
    """Pick the cell with the best mean F1 over ``k`` stratified folds.

    Ties prefer fewer trees, then shallower trees, then larger leaves, then
    grid order.
    """
    X, y = train.to_arrays()
    return grid_search_arrays(X, y, grid if grid is not None else default_grid(), k, seed)


# ------------------------------------------------------------ feature ranking

def _tree_decrease(node: TreeNode, totals: np.ndarray) -> tuple[int, float]:
    """Accumulate weighted impurity decrease; returns (n, positives) of the subtree."""
    if isinstance(node, Leaf):
        return node.n_samples, node.positive_fraction * node.n_samples
    n_l, pos_l = _tree_decrease(node.left, totals)
    n_r, pos_r = _tree_decrease(node.right, totals)
    n, pos = n_l + n_r, pos_l + pos_r
    totals[node.feature_index] += n * gini(pos, n) - n_l * gini(pos_l, n_l) - n_r * gini(pos_r, n_r)
    return n, pos


def importance_vector(forest: Forest) -> np.ndarray:
    totals = np.zeros(len(forest.feature_names))
    for tree in forest.trees:
        per_tree = np.zeros_like(totals)
        n, _ = _tree_decrease(tree, per_tree)
        totals += np.maximum(per_tree, 0.0) / n
    s = totals.sum()
    return totals / s if s > 0 else totals


def feature_importance(forest: Forest) -> dict[str, float]:
    return dict(zip(forest.feature_names, importance_vector(forest).tolist()))


@dataclass(frozen=True)
class RFEResult:
    survivors: tuple[str, ...]
    eliminated: tuple[str, ...]  # in elimination order
    cv_f1: Mapping[int, float] = field(default_factory=dict)  # feature count -> mean F1


def rfe_select(
    train: Dataset,
    hyper: HyperParams,
    target_count: int,
    k: int = 5,
    seed: int = 0,
    score: bool = False,
) -> RFEResult:
    """Drop the least important feature one at a time until ``target_count`` remain.

    Importance ties drop the later feature. With ``score`` the mean CV F1 of
    each intermediate feature set is recorded.
    """
    names = list(train.feature_names)
    if not 1 <= target_count <= len(names):
        raise LearnerError(f"target_count must be within 1..{len(names)}")
    X_all, y = train.to_arrays()
    columns = list(range(len(names)))
    eliminated: list[str] = []
    cv_f1: dict[int, float] = {}
    while True:
        X = X_all[:, columns]
        if score:
            cv_f1[len(columns)] = float(np.mean([r.f1 for r in cross_validate(X, y, hyper, k, seed)]))
        if len(columns) == target_count:
            break
        imp = importance_vector(fit_forest(X, y, hyper, seed, [names[c] for c in columns]))
        lowest = imp.min()
        drop = int(np.flatnonzero(imp <= lowest + 1e-12)[-1])
        eliminated.append(names[columns[drop]])
        del columns[drop]
    return RFEResult(tuple(names[c] for c in columns), tuple(eliminated), cv_f1)


def correlation_matrix(X: np.ndarray) -> np.ndarray:
    """Pairwise Pearson correlation; constant columns correlate 0 with everything."""
    X = np.asarray(X, dtype=float)
    centered = X - X.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    safe = np.where(norms > 0, norms, 1.0)
    C = (centered.T @ centered) / np.outer(safe, safe)
    C[norms == 0, :] = 0.0
    C[:, norms == 0] = 0.0
    np.fill_diagonal(C, np.where(norms > 0, 1.0, 0.0))
    return np.clip(C, -1.0, 1.0)


# --------------------------------------------------------------- serialization

def _node_to_dict(node: TreeNode) -> dict:
    if isinstance(node, Leaf):
        return {"leaf": node.positive_fraction, "n": node.n_samples}
    return {
        "feature": node.feature_index,
        "threshold": node.threshold,
        "n": node.n_samples,
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(data: Mapping) -> TreeNode:
    if "leaf" in data:
        return Leaf(float(data["leaf"]), int(data["n"]))
    return Split(
        int(data["feature"]),
        float(data["threshold"]),
        _node_from_dict(data["left"]),
        _node_from_dict(data["right"]),
        int(data["n"]),
    )


def forest_to_json(forest: Forest) -> str:
    return json.dumps(
        {
            "hyper": asdict(forest.hyper),
            "feature_names": list(forest.feature_names),
            "seed": forest.seed,
            "trees": [_node_to_dict(t) for t in forest.trees],
        }
    )


def forest_from_json(text: str) -> Forest:
    data = json.loads(text)
    return Forest(
        tuple(_node_from_dict(t) for t in data["trees"]),
        HyperParams(**data["hyper"]),
        tuple(data["feature_names"]),
        int(data["seed"]),
    )
