"""Exact reference solvers for small rank-allocation instances.

``brute_force_search`` enumerates every combination; ``dp_separable_search``
solves separable objectives by a knapsack table over the remaining budget.
Both break ties toward the lexicographically smallest rank vector.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import reduce
from typing import Optional, Sequence

import numpy as np

from .errors import CapExceededError, InfeasibleBudgetError, InvalidInputError
from .lowrank import LayerSpec, param_count
from .search import _evaluator_fn

DEFAULT_CAP = 10**6


@dataclass(frozen=True)
class OracleResult:
    best: tuple[int, ...]
    metric: float
    evaluated_count: int


def brute_force_search(evaluator, layers: Sequence[LayerSpec], candidate_sets: Sequence[Sequence[int]],
                       param_budget: Optional[int] = None, cap: int = DEFAULT_CAP) -> OracleResult:
    """Exact argmin over the product of ``candidate_sets`` within the budget."""
    if len(candidate_sets) != len(layers):
        raise InvalidInputError(f"{len(candidate_sets)} candidate sets for {len(layers)} layers")
    sets = [sorted(set(int(r) for r in s)) for s in candidate_sets]
    size = math.prod(len(s) for s in sets)
    if size > cap:
        raise CapExceededError(f"enumeration of {size} combinations exceeds the cap of {cap}", size)
    fn = _evaluator_fn(evaluator)
    best, best_metric, count = None, math.inf, 0
    for combo in itertools.product(*sets):
        if param_budget is not None and param_count(combo, layers) > param_budget:
            continue
        metric = float(fn(list(combo)))
        count += 1
        # lexicographic order: strict < keeps the first (smallest) vector on ties
        if metric < best_metric:
            best, best_metric = combo, metric
    if best is None:
        minimal = sum(min(s) * layer.params_per_rank for s, layer in zip(sets, layers)) if all(sets) else None
        raise InfeasibleBudgetError(
            f"no candidate fits the budget {param_budget}; minimal achievable weight is {minimal}",
            minimal_weight=minimal,
        )
    return OracleResult(tuple(best), best_metric, count)


def dp_separable_search(per_layer_costs: Sequence[Sequence[tuple[int, float, int]]],
                        param_budget: Optional[int] = None) -> OracleResult:
    """Minimize ``sum_i cost_i(r_i)`` subject to ``sum_i weight_i(r_i) <= budget``.

    ``per_layer_costs[i]`` lists ``(rank, cost, weight)`` options for layer
    ``i``; weights are non-negative integers. The returned metric is the
    correctly rounded sum (``math.fsum``) of the chosen costs.
    """
    if not per_layer_costs or any(len(opts) == 0 for opts in per_layer_costs):
        raise InvalidInputError("every layer needs at least one option")
    layers = []
    for i, opts in enumerate(per_layer_costs):
        clean = sorted((int(r), float(c), int(w)) for r, c, w in opts)
        for r, c, w in clean:
            if not math.isfinite(c) or w < 0:
                raise InvalidInputError(f"layer {i}: bad option rank={r} cost={c} weight={w}")
        layers.append(clean)

    minimal = sum(min(w for _, _, w in opts) for opts in layers)
    if param_budget is None:
        param_budget = sum(max(w for _, _, w in opts) for opts in layers)
    if minimal > param_budget:
        raise InfeasibleBudgetError(
            f"budget {param_budget} is below the minimal achievable weight {minimal}",
            minimal_weight=minimal,
        )

    weights = [w for opts in layers for _, _, w in opts if w > 0]
    g = reduce(math.gcd, weights, 0) or 1
    cap = param_budget // g

    # tables[i][b] = min cost of layers i.. using at most b (scaled) weight
    n = len(layers)
    tables = [None] * (n + 1)
    tables[n] = np.zeros(cap + 1)
    count = 0
    for i in range(n - 1, -1, -1):
        nxt = tables[i + 1]
        cur = np.full(cap + 1, np.inf)
        for _, c, w in layers[i]:
            w //= g
            if w > cap:
                continue
            cand = np.full(cap + 1, np.inf)
            cand[w:] = c + nxt[: cap + 1 - w]
            np.minimum(cur, cand, out=cur)
            count += cap + 1
        tables[i] = cur

    # forward pass picks the smallest rank that stays on an optimal path
    b = cap
    chosen, costs = [], []
    for i, opts in enumerate(layers):
        target = tables[i][b]
        for r, c, w in opts:
            ws = w // g
            if ws <= b and c + tables[i + 1][b - ws] == target:
                chosen.append(r)
                costs.append(c)
                b -= ws
                break
    return OracleResult(tuple(chosen), math.fsum(costs), count)


def is_separable(objective) -> bool:
    return callable(getattr(objective, "layer_cost", None))


def separable_costs(objective, layers: Sequence[LayerSpec], candidate_sets,
                    unit: str = "param"):
    """Per-layer ``(rank, cost, weight)`` options for the DP, read from an
    objective exposing ``layer_cost(layer, rank)``.

    ``unit="param"`` weighs rank ``r`` as ``r * (m + n)``; ``unit="rank"``
    weighs it as ``r`` for total-rank budgets.
    """
    if unit not in ("param", "rank"):
        raise InvalidInputError(f"unknown budget unit {unit!r}")
    out = []
    for i, (layer, cands) in enumerate(zip(layers, candidate_sets)):
        per = layer.params_per_rank if unit == "param" else 1
        out.append([(int(r), objective.layer_cost(i, int(r)), int(r) * per) for r in cands])
    return out
