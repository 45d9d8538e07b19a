"""Objective evaluators and the loss functions behind the multi-task heads.

An evaluator is anything with ``evaluate(ranks) -> float`` (lower is better)
and a ``concurrent_safe`` flag. The search engine also accepts plain callables,
which it treats as unsafe for concurrent use.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .importance import FitConfig, fit_low_rank
from .lowrank import as_matrix, tail_energies

NUM_CLASSES = 5


class ObjectiveEvaluator:
    """Base class; subclasses implement :meth:`evaluate`."""

    concurrent_safe = False

    def evaluate(self, ranks: Sequence[int]) -> float:
        raise NotImplementedError

    def __call__(self, ranks):
        return self.evaluate(ranks)


class SpectralTailObjective(ObjectiveEvaluator):
    """Minimal reconstruction energy at the given ranks.

    ``metric(r) = sum_i sum_{j > r_i} sigma_j^(i)^2``, the Eckart-Young error of
    truncating every layer. Separable and non-increasing in each coordinate.
    """

    concurrent_safe = True

    def __init__(self, spectra):
        if len(spectra) == 0:
            raise InvalidInputError("spectral-tail objective needs at least one spectrum")
        self.spectra = [np.asarray(s, dtype=np.float64) for s in spectra]
        for s in self.spectra:
            if s.ndim != 1 or not np.all(np.isfinite(s)) or np.any(s < 0):
                raise InvalidInputError("spectra must be 1-D, finite, non-negative")
        self.tails = [tail_energies(np.sort(s)[::-1]) for s in self.spectra]

    def layer_cost(self, layer: int, rank: int) -> float:
        tail = self.tails[layer]
        if not (0 <= rank < tail.size):
            raise InvalidInputError(f"rank {rank} outside [0, {tail.size - 1}] for layer {layer}")
        return float(tail[rank])

    def evaluate(self, ranks):
        if len(ranks) != len(self.tails):
            raise InvalidInputError(f"expected {len(self.tails)} ranks, got {len(ranks)}")
        return math.fsum(self.layer_cost(i, int(r)) for i, r in enumerate(ranks))


class MatrixFitObjective(ObjectiveEvaluator):
    """Sum over layers of the regularized fit loss of ``W0_i + U_i V_i^T`` to a target.

    Each layer is fitted independently with its own seed derived from ``seed``
    and the layer index, so the result for a layer depends only on its rank.
    Per-layer results are cached.
    """

    concurrent_safe = True

    def __init__(self, bases, targets, cfg: FitConfig = FitConfig(), seed: int = 0):
        if len(bases) != len(targets) or not bases:
            raise InvalidInputError("need matching, non-empty lists of bases and targets")
        self.bases = [as_matrix(b, "base") for b in bases]
        self.targets = [as_matrix(t, "target") for t in targets]
        for i, (b, t) in enumerate(zip(self.bases, self.targets)):
            if b.shape != t.shape:
                raise InvalidInputError(f"layer {i}: base {b.shape} vs target {t.shape}")
        self.cfg = cfg
        self.seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(len(bases))]
        self._cache: dict[tuple[int, int], float] = {}
        self._lock = threading.Lock()

    def layer_loss(self, layer: int, rank: int) -> float:
        key = (layer, rank)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        _, loss = fit_low_rank(self.bases[layer], self.targets[layer], rank, self.cfg, self.seeds[layer])
        with self._lock:
            self._cache[key] = loss
        return loss

    layer_cost = layer_loss

    def evaluate(self, ranks):
        if len(ranks) != len(self.bases):
            raise InvalidInputError(f"expected {len(self.bases)} ranks, got {len(ranks)}")
        return math.fsum(self.layer_loss(i, int(r)) for i, r in enumerate(ranks))


class ScriptedObjective(ObjectiveEvaluator):
    """Looks metrics up in a fixed table; handy for tests and dry runs."""

    concurrent_safe = True

    def __init__(self, table: Mapping[Sequence[int], float], default: Optional[float] = None):
        self.table = {tuple(int(r) for r in k): float(v) for k, v in table.items()}
        self.default = default

    def evaluate(self, ranks):
        key = tuple(int(r) for r in ranks)
        if key in self.table:
            return self.table[key]
        if self.default is None:
            raise KeyError(f"no scripted metric for {list(key)}")
        return self.default


def spectral_tail_objective(spectra) -> SpectralTailObjective:
    return SpectralTailObjective(spectra)


def matrix_fit_objective(bases, targets, cfg: FitConfig = FitConfig(), seed: int = 0) -> MatrixFitObjective:
    return MatrixFitObjective(bases, targets, cfg, seed)


def map_score_to_class(y: float) -> int:
    """Five-way sentiment class from a polarity score in [-1, 1]."""
    if not (-1.0 <= y <= 1.0):
        raise InvalidInputError(f"score {y} outside [-1, 1]")
    if y > 0.5:
        return 4
    if y > 0.049:
        return 3
    if y >= -0.049:
        return 2
    if y >= -0.5:
        return 1
    return 0


def mse_loss(pred, truth) -> float:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size == 0 or p.size != t.size:
        raise InvalidInputError(f"mse_loss needs equal non-empty lengths, got {p.size} and {t.size}")
    return float(np.mean((p - t) ** 2))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def ce_loss(logits, labels) -> float:
    """Mean categorical cross-entropy over rows of ``logits``."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or z.shape[0] != y.size or y.size == 0:
        raise InvalidInputError(f"logits {z.shape} do not match {y.size} labels")
    if not np.issubdtype(y.dtype, np.integer) or np.any(y < 0) or np.any(y >= z.shape[1]):
        raise InvalidInputError(f"labels must be integers in [0, {z.shape[1] - 1}]")
    return float(-np.mean(log_softmax(z)[np.arange(y.size), y]))


@dataclass(frozen=True)
class MultiTaskWeights:
    w_r: float = 0.5
    w_c: float = 0.5

    def __post_init__(self):
        if self.w_r < 0 or self.w_c < 0 or self.w_r + self.w_c <= 0:
            raise InvalidInputError(f"weights must be >= 0 with a positive sum, got {self}")


def multitask_loss(l_r: float, l_c: float, w: MultiTaskWeights = MultiTaskWeights()) -> float:
    return w.w_r * l_r + w.w_c * l_c
