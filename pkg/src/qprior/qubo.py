"""QUBO construction for test selection, plus decomposition into sub-problems."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import TestCaseRecord

PRUNE_TOL = 1e-12


class QuboError(ValueError):
    pass


class LengthMismatch(QuboError):
    pass


class PartitionError(QuboError):
    pass


@dataclass(frozen=True)
class QuboModel:
    """energy(x) = offset + sum_i linear[i] x_i + sum_{i<j} quadratic[i, j] x_i x_j"""

    linear: tuple[float, ...]
    quadratic: Mapping[tuple[int, int], float] = field(default_factory=dict)
    offset: float = 0.0
    var_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        linear = tuple(float(v) for v in self.linear)
        n = len(linear)
        quad: dict[tuple[int, int], float] = {}
        for (i, j), v in self.quadratic.items():
            i, j, v = int(i), int(j), float(v)
            if i == j:
                raise QuboError(f"diagonal entry ({i}, {i}) belongs in linear")
            if i > j:
                i, j = j, i
            if not (0 <= i and j < n):
                raise QuboError(f"quadratic index ({i}, {j}) out of range for n={n}")
            quad[(i, j)] = quad.get((i, j), 0.0) + v
        quad = {k: v for k, v in sorted(quad.items()) if abs(v) >= PRUNE_TOL}
        var_ids = tuple(self.var_ids) if self.var_ids else tuple(str(i) for i in range(n))
        if len(var_ids) != n:
            raise LengthMismatch(f"{len(var_ids)} var_ids for {n} variables")
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "quadratic", quad)
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "var_ids", var_ids)

    @property
    def n(self) -> int:
        return len(self.linear)

    def energy(self, bits: Sequence[int]) -> float:
        if len(bits) != self.n:
            raise LengthMismatch(f"assignment of length {len(bits)} for n={self.n}")
        x = [int(b) for b in bits]
        total = self.offset
        for i, v in enumerate(self.linear):
            if x[i]:
                total += v
        for (i, j), v in self.quadratic.items():
            if x[i] and x[j]:
                total += v
        return total

    def upper(self) -> np.ndarray:
        U = np.zeros((self.n, self.n))
        for (i, j), v in self.quadratic.items():
            U[i, j] = v
        return U

    def symmetric(self) -> np.ndarray:
        U = self.upper()
        return U + U.T

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.quadratic:
            adj[i].append(j)
            adj[j].append(i)
        return [sorted(a) for a in adj]

    def scaled(self, factor: float) -> QuboModel:
        return QuboModel(
            [v * factor for v in self.linear],
            {k: v * factor for k, v in self.quadratic.items()},
            self.offset * factor,
            self.var_ids,
        )

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "var_ids": list(self.var_ids),
            "linear": list(self.linear),
            "quadratic": [[i, j, v] for (i, j), v in self.quadratic.items()],
            "offset": self.offset,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: Mapping) -> QuboModel:
        linear = data["linear"]
        if int(data.get("n", len(linear))) != len(linear):
            raise LengthMismatch("n does not match the linear vector")
        quad = {(int(i), int(j)): float(v) for i, j, v in data.get("quadratic", [])}
        return cls(linear, quad, data.get("offset", 0.0), tuple(data.get("var_ids") or ()))

    @classmethod
    def from_json(cls, text: str) -> QuboModel:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class QuboConfig:
    lambda_r: float = 0.5
    lambda_t: float = 0.3
    batch_size: int | None = None  # None -> min(n, 25)
    overlap_kind: str = "jaccard"

    def __post_init__(self) -> None:
        if self.lambda_r < 0 or self.lambda_t < 0:
            raise QuboError("lambda weights must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise QuboError("batch_size must be positive")
        if self.overlap_kind not in ("jaccard", "raw_intersection_normalized"):
            raise QuboError(f"unknown overlap kind {self.overlap_kind!r}")

    def effective_batch(self, n: int) -> int:
        return self.batch_size if self.batch_size is not None else max(1, min(n, 25))


def overlap_matrix(
    coverage: Sequence[TestCaseRecord] | Sequence[Iterable[str]], kind: str = "jaccard"
) -> np.ndarray:
    """Pairwise coverage similarity with a zero diagonal."""
    sets = [frozenset(c.coverage) if isinstance(c, TestCaseRecord) else frozenset(c) for c in coverage]
    n = len(sets)
    elements = sorted(set().union(*sets)) if sets else []
    index = {e: k for k, e in enumerate(elements)}
    A = np.zeros((n, len(elements)))
    for i, s in enumerate(sets):
        A[i, [index[e] for e in s]] = 1.0
    inter = A @ A.T
    sizes = A.sum(axis=1)
    if kind == "jaccard":
        union = sizes[:, None] + sizes[None, :] - inter
        O = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    elif kind == "raw_intersection_normalized":
        biggest = sizes.max() if n else 0.0
        O = inter / biggest if biggest > 0 else np.zeros_like(inter)
    else:
        raise QuboError(f"unknown overlap kind {kind!r}")
    np.fill_diagonal(O, 0.0)
    return O


def build_selection_qubo(
    p: Sequence[float],
    t: Sequence[float],
    overlap: np.ndarray,
    config: QuboConfig = QuboConfig(),
    var_ids: Sequence[str] = (),
    extra_linear: Sequence[float] | None = None,
) -> QuboModel:
    """Reward predicted detection, charge execution time and pairwise overlap.

    ``extra_linear`` adds per-variable terms, used to fold in overlap with
    tests that are already scheduled.
    """
    p = np.asarray(p, dtype=float)
    t = np.asarray(t, dtype=float)
    overlap = np.asarray(overlap, dtype=float)
    n = len(p)
    if len(t) != n or overlap.shape != (n, n):
        raise LengthMismatch(f"p has {n} entries, t {len(t)}, overlap {overlap.shape}")
    if extra_linear is not None and len(extra_linear) != n:
        raise LengthMismatch("extra_linear length differs from p")
    linear = -p + config.lambda_t * t
    if extra_linear is not None:
        linear = linear + np.asarray(extra_linear, dtype=float)
    quad = {}
    if config.lambda_r > 0:
        rows, cols = np.nonzero(np.triu(overlap, k=1))
        for i, j in zip(rows.tolist(), cols.tolist()):
            quad[(i, j)] = config.lambda_r * float(overlap[i, j])
    return QuboModel(linear.tolist(), quad, 0.0, tuple(var_ids))


# ---------------------------------------------------------------- decomposition

@dataclass(frozen=True)
class SubProblem:
    model: QuboModel
    indices: tuple[int, ...]  # original variable index of each sub variable


@dataclass(frozen=True)
class Decomposition:
    subproblems: tuple[SubProblem, ...]
    cut_edges: int
    cut_weight: float  # total |Q_ij| over dropped edges

    def __iter__(self):
        return iter(self.subproblems)

    def __len__(self) -> int:
        return len(self.subproblems)


def _components(vertices: Sequence[int], adj: Sequence[Sequence[int]]) -> list[list[int]]:
    allowed = set(vertices)
    seen: set[int] = set()
    comps = []
    for v in sorted(vertices):
        if v in seen:
            continue
        comp, queue = [], deque([v])
        seen.add(v)
        while queue:
            u = queue.popleft()
            comp.append(u)
            for w in adj[u]:
                if w in allowed and w not in seen:
                    seen.add(w)
                    queue.append(w)
        comps.append(sorted(comp))
    return comps


def _bisect(vertices: list[int], adj: Sequence[Sequence[int]]) -> tuple[list[int], list[int]]:
    """Grow half the vertex set breadth-first from its minimum-degree vertex."""
    allowed = set(vertices)
    degree = {v: sum(1 for w in adj[v] if w in allowed) for v in vertices}
    start = min(vertices, key=lambda v: (degree[v], v))
    half = (len(vertices) + 1) // 2
    grown, seen, queue = [], {start}, deque([start])
    while queue and len(grown) < half:
        u = queue.popleft()
        grown.append(u)
        for w in adj[u]:
            if w in allowed and w not in seen:
                seen.add(w)
                queue.append(w)
    part = set(grown)
    return sorted(part), sorted(allowed - part)


def _split(vertices: list[int], adj, max_vars: int) -> list[list[int]]:
    out = []
    for comp in _components(vertices, adj):
        if len(comp) <= max_vars:
            out.append(comp)
        else:
            left, right = _bisect(comp, adj)
            out.extend(_split(left, adj, max_vars))
            out.extend(_split(right, adj, max_vars))
    return out


def submodel(model: QuboModel, indices: Sequence[int]) -> QuboModel:
    pos = {v: k for k, v in enumerate(indices)}
    quad = {
        (pos[i], pos[j]): v
        for (i, j), v in model.quadratic.items()
        if i in pos and j in pos
    }
    return QuboModel(
        [model.linear[i] for i in indices],
        quad,
        0.0,
        tuple(model.var_ids[i] for i in indices),
    )


def decompose(model: QuboModel, max_vars: int) -> Decomposition:
    """Split along the interaction graph into sub-problems of at most ``max_vars``.

    Small connected components are packed together in index order; components
    that are too large are bisected repeatedly and the crossing edges dropped.
    The original offset is not carried by any sub-problem.
    """
    if max_vars < 1:
        raise QuboError("max_vars must be at least 1")
    if model.n == 0:
        return Decomposition((), 0, 0.0)
    adj = model.adjacency()
    pieces = sorted(_split(list(range(model.n)), adj, max_vars), key=lambda c: c[0])
    bins: list[list[int]] = []
    current: list[int] = []
    for piece in pieces:
        if current and len(current) + len(piece) > max_vars:
            bins.append(sorted(current))
            current = []
        current.extend(piece)
    if current:
        bins.append(sorted(current))
    owner = {v: b for b, group in enumerate(bins) for v in group}
    cut = [(k, v) for k, v in model.quadratic.items() if owner[k[0]] != owner[k[1]]]
    subs = tuple(SubProblem(submodel(model, group), tuple(group)) for group in bins)
    return Decomposition(subs, len(cut), float(sum(abs(v) for _, v in cut)))


def local_descent(model: QuboModel, bits: Sequence[int]) -> list[int]:
    """One in-order pass of improving single-bit flips."""
    x = np.array([int(b) for b in bits], dtype=float)
    W = model.symmetric()
    lin = np.array(model.linear)
    field_ = lin + W @ x
    for i in range(model.n):
        delta = (1.0 - 2.0 * x[i]) * field_[i]
        if delta < -PRUNE_TOL:
            step = 1.0 - 2.0 * x[i]
            x[i] += step
            field_ += W[:, i] * step
    return [int(v) for v in x]


def merge_solutions(
    subs: Sequence[tuple[SubProblem, Sequence[int]]],
    original: QuboModel,
    descend: bool = True,
) -> tuple[list[int], float]:
    """Stitch sub-assignments back together and repair with one descent pass."""
    bits: list[int | None] = [None] * original.n
    for sub, assignment in subs:
        if len(assignment) != len(sub.indices):
            raise PartitionError("sub-assignment length differs from its sub-problem")
        for k, index in enumerate(sub.indices):
            if not 0 <= index < original.n:
                raise PartitionError(f"variable {index} outside the original model")
            if bits[index] is not None:
                raise PartitionError(f"variable {index} assigned twice")
            bits[index] = int(assignment[k])
    missing = [i for i, b in enumerate(bits) if b is None]
    if missing:
        raise PartitionError(f"variables {missing[:5]} not covered by any sub-problem")
    merged = [int(b) for b in bits]
    if descend:
        merged = local_descent(original, merged)
    return merged, original.energy(merged)
