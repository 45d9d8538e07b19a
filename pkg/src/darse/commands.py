"""Experiment commands behind the CLI, and the files they emit.

File formats (all UTF-8, LF line endings):

``*.result``
    One JSON object, keys sorted, two-space indent. Floats use the shortest
    repr that round-trips exactly.
``history.log``
    One JSON object per line, in evaluation order; see
    :class:`darse.search.HistoryEntry`.
``report.csv``
    ``source,evaluation_index,phase,iteration,metric,running_min,ranks``,
    with ranks joined by ``;``. One row per history entry.
``uniform.csv``
    ``rank,metric,improvement``: the objective at each uniform rank vector,
    with the drop in metric from the previous row.
``sweep.csv``
    ``config,metric,param_count,ranks``, ascending by metric then name.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ExperimentConfig, GroupPartition, allocation_matrices, build_objective
from .errors import CapExceededError, EvaluatorError, NumericFailureError
from .importance import allocate_ranks, importance_score
from .lowrank import param_count
from .oracle import DEFAULT_CAP, brute_force_search, dp_separable_search, is_separable, separable_costs
from .search import ExplorationHistory, explore, history_key
from .toymodel import ToyMultiTaskObjective, write_dataset

REPORT_HEADER = ["source", "evaluation_index", "phase", "iteration", "metric", "running_min", "ranks"]
UNIFORM_HEADER = ["rank", "metric", "improvement"]
SWEEP_HEADER = ["config", "metric", "param_count", "ranks"]


def format_result(result: dict) -> str:
    return json.dumps(result, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_result(path, result: dict) -> None:
    Path(path).write_text(format_result(result))


def read_result(path) -> dict:
    return json.loads(Path(path).read_text())


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(header)
    out.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def _ranks(vec) -> str:
    return ";".join(str(int(r)) for r in vec)


def _checked(objective):
    """Evaluator wrapper that reports failures with the offending vector."""
    fn = getattr(objective, "evaluate", objective)

    def call(vec):
        try:
            metric = fn(vec)
        except (EvaluatorError, NumericFailureError):
            raise
        except Exception as exc:
            raise EvaluatorError(f"evaluator failed at rank vector {list(vec)}: {exc}", vec) from exc
        if not math.isfinite(metric):
            raise EvaluatorError(f"evaluator returned {metric} at rank vector {list(vec)}", vec)
        return metric

    return call


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = cfg.path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_allocate(cfg: ExperimentConfig) -> dict:
    """Score each frozen matrix, split the rank budget, write ``allocation.result``."""
    if "rank_budget" not in cfg.allocation:
        raise ConfigError("allocate needs allocation.rank_budget")
    mats = allocation_matrices(cfg)
    scores = [importance_score(m) for m in mats]
    caps = cfg.allocation.get("caps") or [l.max_rank for l in cfg.layers]
    ranks = allocate_ranks(scores, int(cfg.allocation["rank_budget"]), caps)
    report = {
        "command": "allocate",
        "importance": scores,
        "rank_budget": int(cfg.allocation["rank_budget"]),
        "caps": [int(c) for c in caps],
        "ranks": ranks,
        "rank_total": sum(ranks),
        "param_count": param_count(ranks, cfg.layers),
        "param_budget": cfg.search.param_budget,
        "seed": cfg.seed,
    }
    write_result(_out_dir(cfg) / "allocation.result", report)
    return report


def _phase_summary(history: ExplorationHistory) -> dict:
    out = {}
    for phase in ("seed", "coarse", "fine"):
        entries = [e for e in history if e.phase == phase]
        if not entries:
            continue
        best = min(entries, key=history_key)
        out[phase] = {
            "evaluations": len(entries),
            "iterations": max(e.iteration for e in entries),
            "best": list(best.rank_vector),
            "best_metric": best.metric,
        }
    return out


def history_rows(history: ExplorationHistory, source: str) -> list[list[str]]:
    rows = []
    for entry, run_min in zip(history, history.running_min()):
        rows.append([source, str(entry.evaluation_index), entry.phase, str(entry.iteration),
                     _fmt(entry.metric), _fmt(run_min), _ranks(entry.rank_vector)])
    return rows


def _maybe_dump_dataset(cfg, objective, out: Path) -> None:
    if isinstance(objective, ToyMultiTaskObjective) and not cfg.objective.get("dataset"):
        from .config import toy_dataset
        write_dataset(out / "dataset.csv", toy_dataset(cfg, cfg.objective, objective.spec.width))


def run_search(cfg: ExperimentConfig, objective=None) -> dict:
    """Coarse + fine exploration; writes ``best.result``, ``history.log``, ``report.csv``.

    Evaluator failures still produce a ``best.result`` (with ``status:
    "failed"`` and the offending rank vector) before the error propagates.
    """
    out = _out_dir(cfg)
    objective = build_objective(cfg) if objective is None else objective
    _maybe_dump_dataset(cfg, objective, out)
    with open(out / "history.log", "w") as sink:
        history = ExplorationHistory(sink)
        try:
            best, metric, _ = explore(objective, cfg.layers, cfg.space, cfg.search, history)
        except Exception as exc:
            failed = {
                "command": "search",
                "status": "failed",
                "error": str(exc),
                "rank_vector": list(getattr(exc, "rank_vector", []) or []),
                "evaluations": len(history),
                "seed": cfg.seed,
            }
            write_result(out / "best.result", failed)
            raise
    result = {
        "command": "search",
        "status": "ok",
        "best": list(best),
        "metric": metric,
        "param_count": param_count(best, cfg.layers),
        "param_budget": cfg.search.param_budget,
        "evaluations": len(history),
        "phases": _phase_summary(history),
        "warnings": list(history.warnings),
        "seed": cfg.seed,
    }
    write_result(out / "best.result", result)
    (out / "report.csv").write_text(_csv_text(REPORT_HEADER, history_rows(history, "history.log")))
    return result


def run_oracle(cfg: ExperimentConfig, objective=None) -> dict:
    """Exact optimum over the full rank space; writes ``oracle.result``."""
    objective = build_objective(cfg) if objective is None else objective
    method = cfg.oracle.get("method", "auto")
    if method not in ("auto", "dp", "brute"):
        raise ConfigError(f"oracle.method must be auto, dp or brute, not {method!r}")
    unit = cfg.oracle.get("unit", "param")
    if unit not in ("param", "rank"):
        raise ConfigError(f"oracle.unit must be param or rank, not {unit!r}")
    if method == "auto":
        method = "dp" if is_separable(objective) else "brute"
    if unit == "rank" and method != "dp":
        raise ConfigError("oracle.unit rank needs the dp method on a separable objective")
    cands = [cfg.space.full_candidates(l) for l in cfg.layers]
    budget = cfg.search.param_budget
    if method == "dp":
        if not is_separable(objective):
            raise ConfigError(f"objective {cfg.objective['kind']} is not separable; use method brute")
        res = dp_separable_search(separable_costs(objective, cfg.layers, cands, unit), budget)
    else:
        res = brute_force_search(objective, cfg.layers, cands, budget, int(cfg.oracle.get("cap", DEFAULT_CAP)))
    result = {
        "command": "oracle",
        "method": method,
        "unit": unit,
        "best": list(res.best),
        "metric": res.metric,
        "evaluated_count": res.evaluated_count,
        "param_count": param_count(res.best, cfg.layers),
        "param_budget": budget,
        "seed": cfg.seed,
    }
    write_result(_out_dir(cfg) / "oracle.result", result)
    return result


def sweep_name(group_ranks: Sequence[int]) -> str:
    return f"G{len(group_ranks)}-" + "@".join(str(int(r)) for r in group_ranks)


def run_group_sweep(cfg: ExperimentConfig, partition: Optional[GroupPartition] = None,
                    objective=None) -> list[dict]:
    """Evaluate every per-group rank combination; writes ``sweep.csv``."""
    partition = cfg.sweep if partition is None else partition
    if partition is None:
        raise ConfigError("sweep needs a 'sweep' section with groups and ranks")
    partition.validate(len(cfg.layers))
    count = math.prod(len(r) for r in partition.ranks)
    if count > cfg.sweep_cap:
        raise CapExceededError(f"sweep has {count} combinations, over the cap of {cfg.sweep_cap}", count)
    objective = build_objective(cfg) if objective is None else objective
    fn = _checked(objective)

    rows = []
    for combo in itertools.product(*partition.ranks):
        vec = partition.expand(combo)
        for r, layer in zip(vec, cfg.layers):
            if not (0 <= r <= layer.max_rank):
                raise ConfigError(f"sweep rank {r} exceeds layer {layer.id}'s max rank {layer.max_rank}")
        rows.append({
            "config": sweep_name(combo),
            "metric": fn(vec),
            "param_count": param_count(vec, cfg.layers),
            "ranks": vec,
        })
    rows.sort(key=lambda row: (row["metric"], row["config"]))
    text = _csv_text(SWEEP_HEADER, [[r["config"], _fmt(r["metric"]), str(r["param_count"]), _ranks(r["ranks"])]
                                    for r in rows])
    (_out_dir(cfg) / "sweep.csv").write_text(text)
    return rows


def uniform_table(cfg: ExperimentConfig, objective=None, ranks: Optional[Sequence[int]] = None) -> list[dict]:
    """Objective at uniform rank vectors, each layer clamped to its own maximum."""
    objective = build_objective(cfg) if objective is None else objective
    fn = _checked(objective)
    if ranks is None:
        ranks = cfg.report.get("uniform_ranks") or cfg.space.coarse_grid
    rows, prev = [], None
    for r in ranks:
        vec = [min(int(r), cfg.space.upper(l)) for l in cfg.layers]
        metric = fn(vec)
        rows.append({"rank": int(r), "metric": metric, "improvement": None if prev is None else prev - metric})
        prev = metric
    return rows


def read_history(path) -> ExplorationHistory:
    path = Path(path)
    with open(path) as fh:
        return ExplorationHistory.from_lines(fh, str(path))


def run_report(history_paths: Sequence, out_dir, cfg: Optional[ExperimentConfig] = None) -> dict:
    """Merge history files into ``report.csv``; with a config, add ``uniform.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for p in history_paths:
        rows += history_rows(read_history(p), Path(p).name)
    written = {"report.csv": _csv_text(REPORT_HEADER, rows)}
    if cfg is not None:
        table = uniform_table(cfg)
        written["uniform.csv"] = _csv_text(UNIFORM_HEADER, [
            [str(t["rank"]), _fmt(t["metric"]), "" if t["improvement"] is None else _fmt(t["improvement"])]
            for t in table
        ])
    for name, text in written.items():
        (out / name).write_text(text)
    return {name: out / name for name in written}


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
