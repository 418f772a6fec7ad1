"""QUBO solvers: exhaustive oracle, simulated annealing, and a remote-solver stand-in.

Simulated annealing is the classical substitute for a hardware annealer. All
solvers go through :func:`solve` so the backend can be swapped without touching
callers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numba
import numpy as np

from .qubo import LengthMismatch, QuboModel
from .timing import Clock, default_clock

Assignment = tuple[int, ...]

EXHAUSTIVE_MAX_N = 20
_CHUNK = 1 << 15


class SolverError(RuntimeError):
    pass


class TooLarge(SolverError):
    pass


class UnknownSolver(SolverError):
    pass


@dataclass(frozen=True)
class AnnealSchedule:
    t_start: float = 2.0
    t_end: float = 0.01
    sweeps: int = 2000
    restarts: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.t_end < self.t_start:
            raise ValueError("need 0 < t_end < t_start")
        if self.sweeps < 1 or self.restarts < 1:
            raise ValueError("sweeps and restarts must be positive")

    def temperatures(self) -> np.ndarray:
        if self.sweeps == 1:
            return np.array([self.t_end])
        ratio = self.t_end / self.t_start
        return self.t_start * ratio ** (np.arange(self.sweeps) / (self.sweeps - 1))


@dataclass(frozen=True)
class SolveResult:
    assignment: Assignment
    energy: float
    solver: str
    wall_time: float
    n_restarts_used: int = 1
    serialize_time: float = 0.0
    restart_best: tuple[float, ...] = field(default=(), compare=False)


def energy(model: QuboModel, bits: Sequence[int]) -> float:
    return model.energy(bits)


def _checked(model: QuboModel, bits: Sequence[int], claimed: float, tol: float = 1e-7) -> float:
    exact = energy(model, bits)
    if not math.isclose(exact, claimed, rel_tol=tol, abs_tol=tol):
        raise SolverError(f"solver energy {claimed!r} disagrees with re-evaluation {exact!r}")
    return exact


# ------------------------------------------------------------------ exhaustive

def solve_exhaustive(model: QuboModel, clock: Clock = default_clock) -> SolveResult:
    """Global minimum by enumeration; ties go to the lexicographically smallest bits."""
    n = model.n
    if n > EXHAUSTIVE_MAX_N:
        raise TooLarge(f"exhaustive solve capped at n={EXHAUSTIVE_MAX_N}, got {n}")
    started = clock()
    if n == 0:
        return SolveResult((), model.offset, "exhaustive", clock() - started)
    lin = np.array(model.linear)
    U = model.upper()
    shifts = np.arange(n - 1, -1, -1)
    best_e, best_k = math.inf, 0
    total = 1 << n
    for lo in range(0, total, _CHUNK):
        ks = np.arange(lo, min(total, lo + _CHUNK), dtype=np.int64)
        X = ((ks[:, None] >> shifts[None, :]) & 1).astype(float)
        E = X @ lin + np.einsum("ij,ij->i", X @ U, X)
        k = _lexicographic_min(E)
        # Strict improvement keeps the earliest (lexicographically smallest) minimizer.
        if E[k] < best_e - 1e-12:
            best_e, best_k = float(E[k]), int(ks[k])
    bits = tuple(int(b) for b in ((best_k >> shifts) & 1))
    elapsed = clock() - started
    e = _checked(model, bits, best_e + model.offset)
    return SolveResult(bits, e, "exhaustive", elapsed, 1)


def _lexicographic_min(E: np.ndarray) -> int:
    lowest = E.min()
    return int(np.flatnonzero(E <= lowest + 1e-12)[0])


# ------------------------------------------------------------ simulated annealing

@numba.njit(cache=True)
def _anneal_kernel(W, lin, x0, temps, orders, uniforms, trace):
    n = lin.shape[0]
    x = x0.copy()
    local = lin.copy()
    for i in range(n):
        if x[i] == 1:
            for j in range(n):
                local[j] += W[j, i]
    e = 0.0
    for i in range(n):
        if x[i] == 1:
            e += lin[i] + 0.5 * (local[i] - lin[i])
    best = x.copy()
    best_e = e
    n_trace = 0
    for s in range(temps.shape[0]):
        T = temps[s]
        for k in range(n):
            i = orders[s, k]
            step = 1 - 2 * x[i]
            d = step * local[i]
            if d <= 0.0 or uniforms[s, k] < math.exp(-d / T):
                x[i] += step
                for j in range(n):
                    local[j] += W[j, i] * step
                e += d
                if n_trace < trace.shape[0]:
                    trace[n_trace, 0] = i
                    trace[n_trace, 1] = d
                    n_trace += 1
                if e < best_e - 1e-12:
                    best_e = e
                    best[:] = x
    return best, best_e, n_trace


def _restart_inputs(n: int, sweeps: int, seed: int):
    rng = np.random.default_rng(seed)
    x0 = rng.integers(0, 2, n).astype(np.int64)
    orders = rng.permuted(np.tile(np.arange(n, dtype=np.int64), (sweeps, 1)), axis=1)
    uniforms = rng.random((sweeps, n))
    return x0, orders, uniforms


def anneal_once(
    model: QuboModel, schedule: AnnealSchedule, seed: int, trace_len: int = 0
) -> tuple[Assignment, float, np.ndarray, np.ndarray]:
    """One annealing run. Returns best bits, their tracked energy, the start
    assignment and the accepted-flip trace (variable, delta) if requested."""
    W = model.symmetric()
    lin = np.array(model.linear, dtype=float)
    x0, orders, uniforms = _restart_inputs(model.n, schedule.sweeps, seed)
    trace = np.zeros((trace_len, 2))
    best, best_e, used = _anneal_kernel(W, lin, x0, schedule.temperatures(), orders, uniforms, trace)
    return tuple(int(b) for b in best), float(best_e) + model.offset, x0, trace[:used]


def solve_sa(
    model: QuboModel, schedule: AnnealSchedule = AnnealSchedule(), clock: Clock = default_clock
) -> SolveResult:
    """Best-of-restarts simulated annealing; restart r is seeded with seed + r."""
    if model.n < 1:
        raise SolverError("simulated annealing needs at least one variable")
    started = clock()
    best_bits: Assignment | None = None
    best_e = math.inf
    history = []
    for r in range(schedule.restarts):
        bits, _, _, _ = anneal_once(model, schedule, schedule.seed + r)
        e = energy(model, bits)
        if e < best_e - 1e-12:
            best_bits, best_e = bits, e
        history.append(best_e)
    elapsed = clock() - started
    assert best_bits is not None
    return SolveResult(
        best_bits, _checked(model, best_bits, best_e), "sa", elapsed,
        schedule.restarts, 0.0, tuple(history),
    )


# ---------------------------------------------------------------- dispatch

SOLVERS = ("exhaustive", "sa", "remote_stub")


def _schedule_from(params: Mapping[str, Any] | AnnealSchedule | None) -> AnnealSchedule:
    if isinstance(params, AnnealSchedule):
        return params
    params = dict(params or {})
    params.pop("clock", None)
    return AnnealSchedule(**params)


def solve_remote_stub(
    model: QuboModel, schedule: AnnealSchedule = AnnealSchedule(), clock: Clock = default_clock
) -> SolveResult:
    """Stand-in for a hosted annealer: encode the wire payload, then solve locally."""
    started = clock()
    payload = model.to_json()
    received = QuboModel.from_json(payload)
    serialized = clock() - started
    local = solve_sa(received, schedule, clock)
    return SolveResult(
        local.assignment,
        _checked(model, local.assignment, local.energy),
        "remote_stub",
        serialized + local.wall_time,
        local.n_restarts_used,
        serialized,
        local.restart_best,
    )


def solve(
    model: QuboModel,
    solver_kind: str = "sa",
    params: Mapping[str, Any] | AnnealSchedule | None = None,
    clock: Clock = default_clock,
) -> SolveResult:
    if solver_kind == "exhaustive":
        return solve_exhaustive(model, clock)
    if solver_kind == "sa":
        return solve_sa(model, _schedule_from(params), clock)
    if solver_kind == "remote_stub":
        return solve_remote_stub(model, _schedule_from(params), clock)
    raise UnknownSolver(f"unknown solver {solver_kind!r}; choose from {', '.join(SOLVERS)}")


__all__ = [
    "AnnealSchedule",
    "Assignment",
    "LengthMismatch",
    "SolveResult",
    "SolverError",
    "TooLarge",
    "UnknownSolver",
    "anneal_once",
    "energy",
    "solve",
    "solve_exhaustive",
    "solve_remote_stub",
    "solve_sa",
]
