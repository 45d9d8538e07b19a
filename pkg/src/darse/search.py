"""Greedy rank-space exploration: coarse grid sweep, then a fine window sweep.

Both phases are coordinate descent over layers. For each layer the engine
scores every candidate rank with the other layers held fixed and adopts the
best one. The incumbent rank always competes, so a sweep never makes the
current vector worse. Metrics are minimized throughout.

Every evaluator call lands in an :class:`ExplorationHistory`, and the overall
answer is the argmin of that history, not the last vector a phase ended on.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, NamedTuple, Optional, Sequence, TextIO

import numpy as np

from .errors import EvaluatorError, InfeasibleBudgetError, InvalidInputError
from .lowrank import LayerSpec, check_layers, param_count

log = logging.getLogger(__name__)

PHASES = ("seed", "coarse", "fine")
SWEEP_ORDERS = ("ascending", "descending", "random")
TIE_BREAKS = ("smaller-rank", "first-visited")


def default_coarse_grid(r_min: int, r_max: int) -> tuple[int, ...]:
    """Powers of two in ``[max(1, r_min), r_max]`` plus multiples of 128."""
    lo = max(1, r_min)
    grid = set()
    p = 1
    while p <= r_max:
        if p >= lo:
            grid.add(p)
        p *= 2
    grid.update(k for k in range(128, r_max + 1, 128) if k >= r_min)
    return tuple(sorted(grid))


@dataclass(frozen=True)
class RankSpace:
    """Feasible per-layer ranks plus the coarse grid and fine window width.

    ``mode="grid"`` sweeps ``coarse_grid`` in the coarse phase; ``mode="step"``
    sweeps ``r_min, r_min + r_step, ..., r_max`` instead.
    """

    r_min: int = 0
    r_max: int = 512
    coarse_grid: Optional[tuple[int, ...]] = None
    fine_delta: int = 4
    r_step: int = 1
    mode: str = "grid"

    def __post_init__(self):
        if self.r_min < 0 or self.r_min > self.r_max:
            raise InvalidInputError(f"need 0 <= r_min <= r_max, got {self.r_min}, {self.r_max}")
        if self.fine_delta < 1 or self.r_step < 1:
            raise InvalidInputError("fine_delta and r_step must be >= 1")
        if self.mode not in ("grid", "step"):
            raise InvalidInputError(f"unknown rank space mode {self.mode!r}")
        if self.coarse_grid is None:
            object.__setattr__(self, "coarse_grid", default_coarse_grid(self.r_min, self.r_max))
        grid = tuple(int(g) for g in self.coarse_grid)
        object.__setattr__(self, "coarse_grid", grid)
        if not grid:
            raise InvalidInputError("coarse grid is empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise InvalidInputError(f"coarse grid must be strictly increasing: {grid}")
        if grid[0] < self.r_min or grid[-1] > self.r_max:
            raise InvalidInputError(f"coarse grid {grid} leaves [{self.r_min}, {self.r_max}]")

    def upper(self, layer: LayerSpec) -> int:
        return min(self.r_max, layer.max_rank)

    def coarse_candidates(self, layer: LayerSpec) -> list[int]:
        hi = self.upper(layer)
        if self.mode == "step":
            return list(range(self.r_min, hi + 1, self.r_step))
        return [g for g in self.coarse_grid if g <= hi]

    def fine_candidates(self, center: int, layer: LayerSpec) -> list[int]:
        lo = max(self.r_min, center - self.fine_delta)
        hi = min(self.upper(layer), center + self.fine_delta)
        return list(range(lo, hi + 1))

    def full_candidates(self, layer: LayerSpec) -> list[int]:
        return list(range(self.r_min, self.upper(layer) + 1))


@dataclass(frozen=True)
class SearchConfig:
    epsilon: float = 0.0
    max_iter: int = 10
    param_budget: Optional[int] = None
    tie_break: str = "smaller-rank"
    sweep_order: str = "ascending"
    seed: int = 0
    memoize: bool = True
    jobs: int = 0
    budget_exchange: bool = True

    def __post_init__(self):
        if not math.isfinite(self.epsilon) or self.epsilon < 0:
            raise InvalidInputError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if self.max_iter < 1:
            raise InvalidInputError("max_iter must be >= 1")
        if self.param_budget is not None and self.param_budget < 1:
            raise InvalidInputError("param_budget must be positive when set")
        if self.tie_break not in TIE_BREAKS:
            raise InvalidInputError(f"tie_break must be one of {TIE_BREAKS}")
        if self.sweep_order not in SWEEP_ORDERS:
            raise InvalidInputError(f"sweep_order must be one of {SWEEP_ORDERS}")


@dataclass(frozen=True)
class HistoryEntry:
    rank_vector: tuple[int, ...]
    metric: float
    phase: str
    iteration: int
    evaluation_index: int

    def to_record(self) -> str:
        d = asdict(self)
        d["rank_vector"] = list(self.rank_vector)
        return json.dumps(d, sort_keys=True, allow_nan=False)

    @classmethod
    def from_record(cls, line: str) -> "HistoryEntry":
        d = json.loads(line)
        entry = cls(
            rank_vector=tuple(int(x) for x in d["rank_vector"]),
            metric=float(d["metric"]),
            phase=str(d["phase"]),
            iteration=int(d["iteration"]),
            evaluation_index=int(d["evaluation_index"]),
        )
        if entry.phase not in PHASES:
            raise ValueError(f"unknown phase {entry.phase!r}")
        return entry


def history_key(entry: HistoryEntry):
    """Argmin ordering: metric, then fewer total ranks, then earliest."""
    return entry.metric, sum(entry.rank_vector), entry.evaluation_index


class ExplorationHistory:
    """Append-only log of evaluations, optionally streamed line by line."""

    def __init__(self, sink: Optional[TextIO] = None):
        self.entries: list[HistoryEntry] = []
        self.warnings: list[str] = []
        self._sink = sink
        self._seen: dict[tuple[int, ...], float] = {}

    def append(self, rank_vector, metric: float, phase: str, iteration: int) -> HistoryEntry:
        entry = HistoryEntry(tuple(int(r) for r in rank_vector), float(metric),
                             phase, iteration, len(self.entries))
        self.entries.append(entry)
        self._seen.setdefault(entry.rank_vector, entry.metric)
        if self._sink is not None:
            self._sink.write(entry.to_record() + "\n")
            self._sink.flush()
        return entry

    def lookup(self, rank_vector) -> Optional[float]:
        return self._seen.get(tuple(rank_vector))

    def warn(self, message: str) -> None:
        log.warning(message)
        self.warnings.append(message)

    def best(self) -> HistoryEntry:
        if not self.entries:
            raise InvalidInputError("history is empty")
        return min(self.entries, key=history_key)

    def running_min(self) -> list[float]:
        out, cur = [], math.inf
        for e in self.entries:
            cur = min(cur, e.metric)
            out.append(cur)
        return out

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @classmethod
    def from_lines(cls, lines: Iterable[str], source: str = "<history>") -> "ExplorationHistory":
        hist = cls()
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                entry = HistoryEntry.from_record(line)
            except (ValueError, KeyError, TypeError) as exc:
                raise InvalidInputError(f"{source}:{lineno}: malformed history record ({exc})") from None
            hist.entries.append(entry)
            hist._seen.setdefault(entry.rank_vector, entry.metric)
        return hist


class Decision(enum.Enum):
    CONTINUE = "continue"
    HALT = "halt"


def stop_decision(prev_best: float, new_best: float, cfg) -> Decision:
    """Halt once an outer iteration improves the metric by less than epsilon."""
    eps = cfg.epsilon if isinstance(cfg, SearchConfig) else float(cfg)
    return Decision.HALT if (prev_best - new_best) < eps else Decision.CONTINUE


class ExploreResult(NamedTuple):
    best: tuple[int, ...]
    metric: float
    history: ExplorationHistory


def _evaluator_fn(evaluator) -> Callable[[Sequence[int]], float]:
    fn = getattr(evaluator, "evaluate", None)
    if fn is None:
        if not callable(evaluator):
            raise InvalidInputError("evaluator must be callable or expose evaluate()")
        fn = evaluator
    return fn


class _Engine:
    """Shared evaluation plumbing: memo, budget filter, history, thread pool."""

    def __init__(self, evaluator, layers, cfg: SearchConfig, history: ExplorationHistory,
                 r_min: int = 0):
        check_layers(layers)
        self.r_min = r_min
        self.fn = _evaluator_fn(evaluator)
        self.layers = list(layers)
        self.cfg = cfg
        self.history = history
        parallel = cfg.jobs > 1 and getattr(evaluator, "concurrent_safe", False)
        self.pool = ThreadPoolExecutor(cfg.jobs) if parallel else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def feasible(self, ranks) -> bool:
        b = self.cfg.param_budget
        return b is None or param_count(ranks, self.layers) <= b

    def _call(self, ranks):
        try:
            metric = float(self.fn(list(ranks)))
        except EvaluatorError:
            raise
        except Exception as exc:
            raise EvaluatorError(f"evaluator failed at rank vector {list(ranks)}: {exc}", ranks) from exc
        if not math.isfinite(metric):
            raise EvaluatorError(f"evaluator returned {metric} at rank vector {list(ranks)}", ranks)
        return metric

    def evaluate(self, vectors: list[tuple[int, ...]], phase: str, iteration: int) -> list[float]:
        """Score ``vectors`` in order; history receives only real calls."""
        results: dict[int, float] = {}
        pending: list[int] = []
        first_slot: dict[tuple[int, ...], int] = {}
        for k, vec in enumerate(vectors):
            cached = self.history.lookup(vec) if self.cfg.memoize else None
            if cached is not None:
                results[k] = cached
            elif self.cfg.memoize and vec in first_slot:
                continue
            else:
                first_slot.setdefault(vec, k)
                pending.append(k)

        if self.pool is not None and len(pending) > 1:
            futures = [self.pool.submit(self._call, vectors[k]) for k in pending]
            for k, fut in zip(pending, futures):
                results[k] = fut.result()
                self.history.append(vectors[k], results[k], phase, iteration)
        else:
            for k in pending:
                results[k] = self._call(vectors[k])
                self.history.append(vectors[k], results[k], phase, iteration)

        return [results[k] if k in results else results[first_slot[vectors[k]]]
                for k in range(len(vectors))]

    def order(self) -> list[int]:
        n = len(self.layers)
        if self.cfg.sweep_order == "descending":
            return list(range(n - 1, -1, -1))
        if self.cfg.sweep_order == "random":
            return [int(i) for i in np.random.default_rng(self.cfg.seed).permutation(n)]
        return list(range(n))

    def _moves(self, i, current, candidates, phase, it):
        """Vectors that change layer ``i`` to each candidate rank.

        A candidate that breaks the budget on its own is retried with one
        other layer lowered (to one of its own candidates or ``r_min``), when
        budget exchange is enabled.
        """
        moves = []
        blocked = False
        for c in candidates(i):
            if c == current[i]:
                continue
            vec = list(current)
            vec[i] = c
            if self.feasible(vec):
                moves.append(tuple(vec))
                continue
            blocked = True
            if not self.cfg.budget_exchange:
                continue
            for j in self.order():
                if j == i:
                    continue
                lower = sorted({r for r in candidates(j) if r < current[j]} |
                               ({self.r_min} if self.r_min < current[j] else set()))
                for c2 in lower:
                    pair = list(vec)
                    pair[j] = c2
                    if self.feasible(pair):
                        moves.append(tuple(pair))
        if blocked and not moves:
            self.history.warn(
                f"{phase} iteration {it}: budget saturated at layer {i}, keeping rank {current[i]}"
            )
        return list(dict.fromkeys(moves))

    def _relax_layer(self, i, current, current_metric, candidates, phase, it):
        """Adopt the best move for layer ``i`` in place; returns the new metric."""
        moves = self._moves(i, current, candidates, phase, it)
        metrics = self.evaluate(moves, phase, it)
        # the incumbent competes at position -1 so it wins first-visited ties
        pool = [(current_metric, tuple(current), -1)]
        pool += [(m, v, pos) for pos, (m, v) in enumerate(zip(metrics, moves))]
        if self.cfg.tie_break == "smaller-rank":
            best = min(pool, key=lambda t: (t[0], sum(t[1]), t[1][i], t[2]))
        else:
            best = min(pool, key=lambda t: (t[0], t[2]))
        current[:] = best[1]
        return best[0]

    def sweep(self, start, candidates: Callable[[int], list[int]], phase: str) -> list[int]:
        """Outer coordinate-descent loop shared by both phases."""
        current = [int(r) for r in start]
        if not self.feasible(current):
            raise InfeasibleBudgetError(
                f"{phase} start {current} uses {param_count(current, self.layers)} parameters, "
                f"over the budget {self.cfg.param_budget}",
                minimal_weight=param_count(current, self.layers),
            )
        start_phase = "seed" if phase == "coarse" else phase
        current_metric = self.evaluate([tuple(current)], start_phase, 0)[0]
        prev = current_metric
        order = self.order()

        for it in range(1, self.cfg.max_iter + 1):
            before = list(current)
            for i in order:
                current_metric = self._relax_layer(i, current, current_metric, candidates, phase, it)

            decision = stop_decision(prev, current_metric, self.cfg)
            prev = current_metric
            if decision is Decision.HALT or current == before:
                break
        return current


def coarse_search(evaluator, layers: Sequence[LayerSpec], space: RankSpace,
                  cfg: SearchConfig, history: ExplorationHistory) -> list[int]:
    """Sweep each layer over the coarse grid, starting from all ``r_min``."""
    engine = _Engine(evaluator, layers, cfg, history, space.r_min)
    try:
        start = [space.r_min] * len(layers)
        return engine.sweep(start, lambda i: space.coarse_candidates(engine.layers[i]), "coarse")
    finally:
        engine.close()


def fine_search(evaluator, layers: Sequence[LayerSpec], coarse: Sequence[int],
                space: RankSpace, cfg: SearchConfig, history: ExplorationHistory) -> list[int]:
    """Sweep each layer over ``coarse[i] +/- fine_delta`` with unit steps."""
    if len(coarse) != len(layers):
        raise InvalidInputError(f"coarse vector has {len(coarse)} entries for {len(layers)} layers")
    for r, layer in zip(coarse, layers):
        if not (space.r_min <= r <= space.upper(layer)):
            raise InvalidInputError(f"coarse rank {r} outside the space for layer {layer.id}")
    engine = _Engine(evaluator, layers, cfg, history, space.r_min)
    try:
        return engine.sweep(
            coarse, lambda i: space.fine_candidates(int(coarse[i]), engine.layers[i]), "fine"
        )
    finally:
        engine.close()


def explore(evaluator, layers: Sequence[LayerSpec], space: RankSpace, cfg: SearchConfig,
            history: Optional[ExplorationHistory] = None) -> ExploreResult:
    """Coarse then fine search on one shared history; returns its argmin."""
    history = ExplorationHistory() if history is None else history
    coarse = coarse_search(evaluator, layers, space, cfg, history)
    fine_search(evaluator, layers, coarse, space, cfg, history)
    best = history.best()
    return ExploreResult(best.rank_vector, best.metric, history)
