"""YAML experiment configs and the objects they describe.

Relative file paths inside a config resolve against the config's directory.
Every section is optional except ``layers`` and ``objective``; omitted knobs
take the defaults of the corresponding dataclass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .errors import InvalidInputError
from .importance import FitConfig
from .lowrank import LayerSpec, make_layers, random_matrix, read_matrix, singular_values
from .objectives import (
    MatrixFitObjective,
    MultiTaskWeights,
    ScriptedObjective,
    SpectralTailObjective,
)
from .search import RankSpace, SearchConfig
from .toymodel import (
    ToyModelSpec,
    ToyMultiTaskObjective,
    TrainConfig,
    generate_synthetic_sentiment,
    read_dataset,
)

OBJECTIVE_KINDS = ("spectral_tail", "matrix_fit", "toy_multitask", "scripted")

# allowed keys per objective kind, and inside its ``generate`` block
OBJECTIVE_KEYS = {
    "spectral_tail": ({"spectra", "matrices", "generate"}, {"decay", "scale"}),
    "matrix_fit": ({"bases", "targets", "generate", "fit"}, {"decay", "scale"}),
    "toy_multitask": ({"model", "train", "dataset", "generate"}, {"count", "noise_std"}),
    "scripted": ({"entries", "default"}, set()),
}


class ConfigError(InvalidInputError):
    pass


@dataclass(frozen=True)
class GroupPartition:
    """Contiguous inclusive layer-id ranges with candidate ranks per group."""

    groups: tuple[tuple[int, int], ...]
    ranks: tuple[tuple[int, ...], ...]

    def validate(self, n_layers: int) -> None:
        if not self.groups:
            raise ConfigError("sweep needs at least one group")
        if len(self.ranks) != len(self.groups):
            raise ConfigError(f"{len(self.ranks)} rank lists for {len(self.groups)} groups")
        expect = 0
        for lo, hi in self.groups:
            if lo != expect or hi < lo:
                raise ConfigError(
                    f"groups must be contiguous, disjoint and start at 0; got {list(self.groups)}"
                )
            expect = hi + 1
        if expect != n_layers:
            raise ConfigError(f"groups cover layers 0..{expect - 1} but the model has {n_layers}")
        if any(not r for r in self.ranks):
            raise ConfigError("every group needs at least one candidate rank")

    def expand(self, group_ranks) -> list[int]:
        out = []
        for (lo, hi), r in zip(self.groups, group_ranks):
            out.extend([int(r)] * (hi - lo + 1))
        return out


@dataclass
class ExperimentConfig:
    layers: list[LayerSpec]
    space: RankSpace
    search: SearchConfig
    objective: dict[str, Any]
    allocation: dict[str, Any] = field(default_factory=dict)
    weights: MultiTaskWeights = field(default_factory=MultiTaskWeights)
    sweep: Optional[GroupPartition] = None
    sweep_cap: int = 100_000
    oracle: dict[str, Any] = field(default_factory=dict)
    report: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    output_dir: Path = Path("out")
    base_dir: Path = Path(".")

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


def _section(raw, key, allowed):
    sec = raw.get(key) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {key!r} must be a mapping")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
    return sec


def _build(cls, sec, where):
    try:
        return cls(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    known = {"layers", "space", "search", "objective", "allocation", "weights",
             "sweep", "oracle", "report", "seed", "output_dir"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if "layers" not in raw:
        raise ConfigError("config needs a 'layers' list of [rows, cols]")
    try:
        layers = make_layers(raw["layers"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad layers: {exc}") from None
    if not layers:
        raise ConfigError("config needs at least one layer")
    seed = int(raw.get("seed", 0))

    space_sec = dict(_section(raw, "space", ("r_min", "r_max", "coarse_grid", "fine_delta", "r_step", "mode")))
    if "coarse_grid" in space_sec and space_sec["coarse_grid"] is not None:
        space_sec["coarse_grid"] = tuple(space_sec["coarse_grid"])
    space = _build(RankSpace, space_sec, "space")

    search_sec = dict(_section(raw, "search", ("epsilon", "max_iter", "param_budget", "tie_break",
                                               "sweep_order", "memoize", "jobs", "budget_exchange")))
    search_sec.setdefault("seed", seed)
    search = _build(SearchConfig, search_sec, "search")

    objective = raw.get("objective")
    if not isinstance(objective, dict) or objective.get("kind") not in OBJECTIVE_KINDS:
        raise ConfigError(f"objective.kind must be one of {OBJECTIVE_KINDS}")
    keys, gen_keys = OBJECTIVE_KEYS[objective["kind"]]
    unknown = set(objective) - keys - {"kind"}
    if unknown:
        raise ConfigError(f"unknown keys for objective {objective['kind']}: {sorted(unknown)}")
    unknown = set(objective.get("generate") or {}) - gen_keys
    if unknown:
        raise ConfigError(f"unknown keys in objective.generate: {sorted(unknown)}")
    if objective["kind"] == "matrix_fit" and ("bases" in objective) != ("targets" in objective):
        raise ConfigError("matrix_fit needs both bases and targets, or neither")

    weights = _build(MultiTaskWeights, _section(raw, "weights", ("w_r", "w_c")), "weights")

    sweep, sweep_cap = None, 100_000
    if raw.get("sweep"):
        sec = _section(raw, "sweep", ("groups", "ranks", "cap"))
        groups = tuple((int(lo), int(hi)) for lo, hi in sec.get("groups", []))
        ranks = sec.get("ranks", [])
        if ranks and not isinstance(ranks[0], (list, tuple)):
            ranks = [ranks] * len(groups)
        sweep = GroupPartition(groups, tuple(tuple(int(r) for r in rs) for rs in ranks))
        sweep.validate(len(layers))
        sweep_cap = int(sec.get("cap", sweep_cap))

    cfg = ExperimentConfig(
        layers=layers,
        space=space,
        search=search,
        objective=objective,
        allocation=_section(raw, "allocation", ("rank_budget", "caps", "matrices", "spectra", "identity")),
        weights=weights,
        sweep=sweep,
        sweep_cap=sweep_cap,
        oracle=_section(raw, "oracle", ("method", "cap", "unit")),
        report=_section(raw, "report", ("uniform_ranks",)),
        seed=seed,
        output_dir=Path(raw.get("output_dir", "out")),
        base_dir=base_dir,
    )
    _check_files(cfg)
    return cfg


def _check_files(cfg: ExperimentConfig) -> None:
    paths = []
    for key in ("matrices", "bases", "targets"):
        paths += cfg.objective.get(key) or []
    if cfg.objective.get("dataset"):
        paths.append(cfg.objective["dataset"])
    paths += cfg.allocation.get("matrices") or []
    for p in paths:
        if not cfg.path(p).is_file():
            raise ConfigError(f"referenced file does not exist: {cfg.path(p)}")


def load_config(path, seed: Optional[int] = None, output_dir=None,
                jobs: Optional[int] = None) -> ExperimentConfig:
    """Read a YAML config; keyword arguments override the file's values."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping at the top level")
    if seed is not None:
        raw["seed"] = seed
        if isinstance(raw.get("search"), dict):
            raw["search"].pop("seed", None)
    if output_dir is not None:
        raw["output_dir"] = str(Path(output_dir).resolve())
    if jobs is not None:
        raw.setdefault("search", {})
        raw["search"] = dict(raw["search"] or {}, jobs=jobs)
    return parse_config(raw, path.parent)


def _per_layer(value, n, rng):
    """Scalar, ``[lo, hi]`` range drawn per layer, or an explicit list of n."""
    if isinstance(value, (int, float)):
        return [float(value)] * n
    value = [float(v) for v in value]
    if len(value) == n:
        return value
    if len(value) == 2:
        return list(rng.uniform(value[0], value[1], size=n))
    raise ConfigError(f"expected a scalar, [lo, hi] or {n} values, got {value}")


def generated_spectra(layers, seed: int, decay=0.7, scale=1.0) -> list[np.ndarray]:
    """Geometric spectra ``scale_i * decay_i ** j`` of length ``min(m_i, n_i)``."""
    rng = np.random.default_rng(seed)
    decays = _per_layer(decay, len(layers), rng)
    scales = _per_layer(scale, len(layers), rng)
    return [s * d ** np.arange(layer.max_rank) for layer, s, d in zip(layers, scales, decays)]


def _matrices(cfg, spec, key):
    return [read_matrix(cfg.path(p)) for p in spec[key]]


def _spectral_tail(cfg: ExperimentConfig, spec) -> SpectralTailObjective:
    if "spectra" in spec:
        spectra = spec["spectra"]
    elif "matrices" in spec:
        spectra = [singular_values(m) for m in _matrices(cfg, spec, "matrices")]
    else:
        gen = spec.get("generate") or {}
        spectra = generated_spectra(cfg.layers, cfg.seed, gen.get("decay", 0.7), gen.get("scale", 1.0))
    if len(spectra) != len(cfg.layers):
        raise ConfigError(f"{len(spectra)} spectra for {len(cfg.layers)} layers")
    for layer, s in zip(cfg.layers, spectra):
        if len(s) != layer.max_rank:
            raise ConfigError(f"layer {layer.id}: spectrum has {len(s)} values, expected {layer.max_rank}")
    return SpectralTailObjective(spectra)


def _matrix_fit(cfg: ExperimentConfig, spec) -> MatrixFitObjective:
    fit = _build(FitConfig, spec.get("fit") or {}, "objective.fit")
    if "bases" in spec:
        bases = _matrices(cfg, spec, "bases")
        targets = _matrices(cfg, spec, "targets")
    else:
        gen = spec.get("generate") or {}
        spectra = generated_spectra(cfg.layers, cfg.seed, gen.get("decay", 0.7), gen.get("scale", 1.0))
        bases, targets = [], []
        for i, (layer, s) in enumerate(zip(cfg.layers, spectra)):
            base = random_matrix(layer.rows, layer.cols, seed=cfg.seed * 1000 + 2 * i)
            delta = random_matrix(layer.rows, layer.cols, seed=cfg.seed * 1000 + 2 * i + 1, spectrum=s)
            bases.append(base)
            targets.append(base + delta)
    for layer, b in zip(cfg.layers, bases):
        if b.shape != (layer.rows, layer.cols):
            raise ConfigError(f"layer {layer.id}: matrix shape {b.shape} != ({layer.rows}, {layer.cols})")
    return MatrixFitObjective(bases, targets, fit, cfg.seed)


def toy_dataset(cfg: ExperimentConfig, spec, width: int):
    if spec.get("dataset"):
        return read_dataset(cfg.path(spec["dataset"]))
    gen = spec.get("generate") or {}
    return generate_synthetic_sentiment(int(gen.get("count", 500)), width,
                                        float(gen.get("noise_std", 0.0)), cfg.seed)


def _toy(cfg: ExperimentConfig, spec) -> ToyMultiTaskObjective:
    model = dict(spec.get("model") or {})
    model.setdefault("depth", len(cfg.layers))
    model.setdefault("width", cfg.layers[0].rows)
    model.setdefault("base_seed", cfg.seed)
    mspec = _build(ToyModelSpec, model, "objective.model")
    if any((l.rows, l.cols) != (mspec.width, mspec.width) for l in cfg.layers) or mspec.depth != len(cfg.layers):
        raise ConfigError("toy_multitask needs square layers matching model.width and model.depth")
    train = _build(TrainConfig, spec.get("train") or {}, "objective.train")
    return ToyMultiTaskObjective(mspec, toy_dataset(cfg, spec, mspec.width), train, cfg.weights, cfg.seed)


def _scripted(cfg: ExperimentConfig, spec) -> ScriptedObjective:
    table = {}
    for entry in spec.get("entries", []):
        ranks = tuple(int(r) for r in entry["ranks"])
        if len(ranks) != len(cfg.layers):
            raise ConfigError(f"scripted entry {list(ranks)} has the wrong length")
        table[ranks] = float(entry["metric"])
    default = spec.get("default")
    return ScriptedObjective(table, None if default is None else float(default))


def build_objective(cfg: ExperimentConfig):
    spec = cfg.objective
    builder = {
        "spectral_tail": _spectral_tail,
        "matrix_fit": _matrix_fit,
        "toy_multitask": _toy,
        "scripted": _scripted,
    }[spec["kind"]]
    return builder(cfg, spec)


def allocation_matrices(cfg: ExperimentConfig) -> list[np.ndarray]:
    """Frozen matrices scored by the ``allocate`` command."""
    alloc = cfg.allocation
    if alloc.get("matrices"):
        mats = [read_matrix(cfg.path(p)) for p in alloc["matrices"]]
    elif alloc.get("spectra"):
        mats = [random_matrix(l.rows, l.cols, seed=cfg.seed + i, spectrum=s)
                for i, (l, s) in enumerate(zip(cfg.layers, alloc["spectra"]))]
    elif alloc.get("identity"):
        mats = [np.eye(l.rows, l.cols) for l in cfg.layers]
    else:
        mats = [random_matrix(l.rows, l.cols, seed=cfg.seed + i) for i, l in enumerate(cfg.layers)]
    if len(mats) != len(cfg.layers):
        raise ConfigError(f"{len(mats)} allocation matrices for {len(cfg.layers)} layers")
    for l, m in zip(cfg.layers, mats):
        if m.shape != (l.rows, l.cols):
            raise ConfigError(f"layer {l.id}: matrix shape {m.shape} != ({l.rows}, {l.cols})")
    return mats
