"""A small numpy multi-task model whose adapter ranks can be searched over.

The encoder is a stack of frozen square matrices, each with a LoRA-style
update ``W0 + U V^T``; features flow through it linearly. Half of each frozen
matrix's singular directions are zeroed by default, so some signal can only
reach the heads through the adapters and rank has a measurable effect.

Two heads sit on the encoder output:

* regression: linear -> sigmoid -> linear, trained with MSE on the score;
* classification: dropout -> linear -> tanh -> dropout -> linear, trained
  with cross-entropy on the five-way label.

Training is full-batch gradient descent with a fixed step on the weighted
sum of both losses. Gradients are hand-written.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError, InvalidRankError, NumericFailureError
from .objectives import (
    NUM_CLASSES,
    MultiTaskWeights,
    ObjectiveEvaluator,
    log_softmax,
    map_score_to_class,
    mse_loss,
)


@dataclass(frozen=True)
class SentimentSample:
    features: tuple[float, ...]
    score: float
    label: int


def generate_synthetic_sentiment(count: int, feature_dim: int, noise_std: float = 0.0,
                                 seed: int = 0, scale: float = 1.5) -> list[SentimentSample]:
    """Gaussian features scored by a planted teacher ``tanh(scale * w.x)``.

    ``w`` is a seeded unit vector. Noise is added before clipping to [-1, 1]
    and labels always come from the final score.
    """
    if count < 10:
        raise InvalidInputError(f"need at least 10 samples, got {count}")
    if feature_dim < 1:
        raise InvalidInputError("feature_dim must be >= 1")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(feature_dim)
    w /= np.linalg.norm(w)
    x = rng.standard_normal((count, feature_dim))
    y = np.tanh(scale * (x @ w))
    if noise_std > 0:
        y = y + noise_std * rng.standard_normal(count)
    y = np.clip(y, -1.0, 1.0)
    return [
        SentimentSample(tuple(float(v) for v in row), float(s), map_score_to_class(float(s)))
        for row, s in zip(x, y)
    ]


def write_dataset(path, samples: Sequence[SentimentSample]) -> None:
    """One sample per line: features..., score, label (comma-separated)."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        for s in samples:
            out.writerow([repr(v) for v in s.features] + [repr(s.score), s.label])


def read_dataset(path) -> list[SentimentSample]:
    samples = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                feats = tuple(float(v) for v in row[:-2])
                score, label = float(row[-2]), int(row[-1])
            except (ValueError, IndexError):
                raise InvalidInputError(f"{path}:{lineno}: malformed sample row") from None
            if not feats:
                raise InvalidInputError(f"{path}:{lineno}: sample has no features")
            if label != map_score_to_class(score):
                raise InvalidInputError(f"{path}:{lineno}: label {label} disagrees with score {score}")
            samples.append(SentimentSample(feats, score, label))
    return samples


def make_encoder_bases(depth: int, width: int, keep_fraction: float = 0.5,
                       seed: int = 0) -> list[np.ndarray]:
    """Frozen ``width x width`` matrices with a random ``keep_fraction`` of
    unit singular values and the rest zero."""
    if not (0.0 <= keep_fraction <= 1.0):
        raise InvalidInputError("keep_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    keep = int(round(keep_fraction * width))
    s = np.zeros(width)
    s[:keep] = 1.0
    bases = []
    for _ in range(depth):
        qa, _ = np.linalg.qr(rng.standard_normal((width, width)))
        qb, _ = np.linalg.qr(rng.standard_normal((width, width)))
        bases.append((qa * s) @ qb.T)
    return bases


@dataclass(frozen=True)
class ToyModelSpec:
    depth: int = 4
    width: int = 32
    reg_hidden: int = 16
    cls_hidden: int = 16
    dropout: float = 0.1
    keep_fraction: float = 0.5
    base_seed: int = 0

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.reg_hidden < 1 or self.cls_hidden < 1:
            raise InvalidInputError("toy model dimensions must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise InvalidInputError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    """Full-batch gradient descent; ``clip_norm`` caps the global gradient norm
    (0 disables). The product of adapted layers is multiplicative in the
    factors, so large steps can blow up without the cap."""

    step_size: float = 0.2
    max_steps: int = 1500
    clip_norm: float = 1.0

    def __post_init__(self):
        if not self.step_size > 0 or self.max_steps < 1:
            raise InvalidInputError("step_size must be > 0 and max_steps >= 1")
        if not self.clip_norm >= 0:
            raise InvalidInputError("clip_norm must be >= 0")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ToyMultiTaskModel:
    """Parameters live in ``self.params``; the frozen bases are not in it."""

    def __init__(self, bases, ranks, reg_hidden: int = 16, cls_hidden: int = 16,
                 dropout: float = 0.1, seed: int = 0):
        self.bases = [np.asarray(b, dtype=np.float64) for b in bases]
        if len(ranks) != len(self.bases):
            raise InvalidInputError(f"{len(ranks)} ranks for {len(self.bases)} encoder layers")
        for i in range(1, len(self.bases)):
            if self.bases[i].shape[0] != self.bases[i - 1].shape[1]:
                raise InvalidInputError(f"encoder layer {i} does not chain onto layer {i - 1}")
        self.ranks = [int(r) for r in ranks]
        self.dropout = dropout
        rng = np.random.default_rng(seed)
        p = {}
        for i, (b, r) in enumerate(zip(self.bases, self.ranks)):
            m, n = b.shape
            if not (0 <= r <= min(m, n)):
                raise InvalidRankError(f"rank {r} outside [0, {min(m, n)}] at layer {i}")
            p[f"U{i}"] = np.zeros((m, r))
            p[f"V{i}"] = rng.standard_normal((n, r)) / math.sqrt(n)
        d = self.bases[-1].shape[1]
        p["A1"] = rng.standard_normal((d, reg_hidden)) / math.sqrt(d)
        p["a1"] = np.zeros(reg_hidden)
        p["A2"] = rng.standard_normal((reg_hidden, 1)) / math.sqrt(reg_hidden)
        p["a2"] = np.zeros(1)
        p["C1"] = rng.standard_normal((d, cls_hidden)) / math.sqrt(d)
        p["c1"] = np.zeros(cls_hidden)
        p["C2"] = rng.standard_normal((cls_hidden, NUM_CLASSES)) / math.sqrt(cls_hidden)
        p["c2"] = np.zeros(NUM_CLASSES)
        self.params = p

    @property
    def input_dim(self) -> int:
        return self.bases[0].shape[0]

    def _dropout_mask(self, shape, rng):
        if rng is None or self.dropout == 0.0:
            return None
        keep = 1.0 - self.dropout
        return (rng.random(shape) < keep) / keep

    def forward(self, x, rng: Optional[np.random.Generator] = None):
        """Returns ``(pred, logits, cache)``; dropout runs only when ``rng`` is given."""
        p = self.params
        hs = [x]
        for i, b in enumerate(self.bases):
            hs.append(hs[-1] @ (b + p[f"U{i}"] @ p[f"V{i}"].T))
        h = hs[-1]
        s = _sigmoid(h @ p["A1"] + p["a1"])
        pred = (s @ p["A2"] + p["a2"])[:, 0]
        mask1 = self._dropout_mask(h.shape, rng)
        hd = h if mask1 is None else h * mask1
        t = np.tanh(hd @ p["C1"] + p["c1"])
        mask2 = self._dropout_mask(t.shape, rng)
        td = t if mask2 is None else t * mask2
        logits = td @ p["C2"] + p["c2"]
        cache = dict(hs=hs, s=s, hd=hd, mask1=mask1, t=t, td=td, mask2=mask2)
        return pred, logits, cache

    def loss(self, x, y, z, w: MultiTaskWeights, rng=None) -> float:
        pred, logits, _ = self.forward(x, rng)
        lc = -np.mean(log_softmax(logits)[np.arange(z.size), z])
        return float(w.w_r * np.mean((pred - y) ** 2) + w.w_c * lc)

    def loss_and_grads(self, x, y, z, w: MultiTaskWeights, rng=None):
        p = self.params
        n = x.shape[0]
        pred, logits, c = self.forward(x, rng)
        logp = log_softmax(logits)
        loss = w.w_r * np.mean((pred - y) ** 2) - w.w_c * np.mean(logp[np.arange(n), z])
        g = {}

        dpred = (w.w_r * 2.0 / n) * (pred - y)
        s = c["s"]
        g["A2"] = s.T @ dpred[:, None]
        g["a2"] = np.array([dpred.sum()])
        dz1 = (dpred[:, None] @ p["A2"].T) * s * (1.0 - s)
        h = c["hs"][-1]
        g["A1"] = h.T @ dz1
        g["a1"] = dz1.sum(axis=0)
        dh = dz1 @ p["A1"].T

        dlogits = np.exp(logp)
        dlogits[np.arange(n), z] -= 1.0
        dlogits *= w.w_c / n
        g["C2"] = c["td"].T @ dlogits
        g["c2"] = dlogits.sum(axis=0)
        dt = dlogits @ p["C2"].T
        if c["mask2"] is not None:
            dt = dt * c["mask2"]
        dpre = dt * (1.0 - c["t"] ** 2)
        g["C1"] = c["hd"].T @ dpre
        g["c1"] = dpre.sum(axis=0)
        dhd = dpre @ p["C1"].T
        dh = dh + (dhd if c["mask1"] is None else dhd * c["mask1"])

        for i in range(len(self.bases) - 1, -1, -1):
            u, v = p[f"U{i}"], p[f"V{i}"]
            dm = c["hs"][i].T @ dh
            g[f"U{i}"] = dm @ v
            g[f"V{i}"] = dm.T @ u
            dh = dh @ (self.bases[i] + u @ v.T).T
        return float(loss), g

    def predict(self, x) -> np.ndarray:
        pred, _, _ = self.forward(x)
        return np.clip(pred, -1.0, 1.0)

    def train(self, x, y, z, w: MultiTaskWeights, cfg: TrainConfig, seed: int = 0) -> float:
        rng = np.random.default_rng(seed)
        loss = math.nan
        for step in range(cfg.max_steps):
            loss, grads = self.loss_and_grads(x, y, z, w, rng)
            if not math.isfinite(loss):
                raise NumericFailureError(f"toy training diverged at step {step}: loss {loss}")
            step_size = cfg.step_size
            if cfg.clip_norm > 0:
                norm = math.sqrt(math.fsum(float(np.sum(gk * gk)) for gk in grads.values()))
                if norm > cfg.clip_norm:
                    step_size *= cfg.clip_norm / norm
            for k, gk in grads.items():
                self.params[k] -= step_size * gk
        return loss


def _stack(samples):
    x = np.array([s.features for s in samples], dtype=np.float64)
    y = np.array([s.score for s in samples], dtype=np.float64)
    z = np.array([s.label for s in samples], dtype=np.int64)
    return x, y, z


def split_dataset(samples, seed: int = 0, train_fraction: float = 0.9):
    """Seeded shuffle then a ``train_fraction`` / rest split."""
    idx = np.random.default_rng(seed).permutation(len(samples))
    cut = int(round(train_fraction * len(samples)))
    train = [samples[i] for i in idx[:cut]]
    val = [samples[i] for i in idx[cut:]]
    if not train or not val:
        raise InvalidInputError(f"split of {len(samples)} samples leaves an empty side")
    return train, val


class ToyMultiTaskObjective(ObjectiveEvaluator):
    """Trains a fresh :class:`ToyMultiTaskModel` per call and returns the
    validation MSE of its (clamped) regression head."""

    concurrent_safe = True

    def __init__(self, spec: ToyModelSpec, dataset, train_cfg: TrainConfig = TrainConfig(),
                 weights: MultiTaskWeights = MultiTaskWeights(), seed: int = 0):
        if not dataset:
            raise InvalidInputError("toy objective needs a non-empty dataset")
        dims = {len(s.features) for s in dataset}
        if dims != {spec.width}:
            raise InvalidInputError(f"sample feature sizes {sorted(dims)} != encoder width {spec.width}")
        self.spec = spec
        self.train_cfg = train_cfg
        self.weights = weights
        self.seed = seed
        self.bases = make_encoder_bases(spec.depth, spec.width, spec.keep_fraction, spec.base_seed)
        train, val = split_dataset(list(dataset), seed)
        self.train_data = _stack(train)
        self.val_data = _stack(val)

    def build(self, ranks) -> ToyMultiTaskModel:
        return ToyMultiTaskModel(self.bases, ranks, self.spec.reg_hidden, self.spec.cls_hidden,
                                 self.spec.dropout, seed=self.seed)

    def evaluate(self, ranks):
        model = self.build(ranks)
        model.train(*self.train_data, self.weights, self.train_cfg, seed=self.seed + 1)
        xv, yv, _ = self.val_data
        return mse_loss(model.predict(xv), yv)


def toy_multitask_objective(spec: ToyModelSpec, dataset, train_cfg: TrainConfig = TrainConfig(),
                            weights: MultiTaskWeights = MultiTaskWeights(),
                            seed: int = 0) -> ToyMultiTaskObjective:
    return ToyMultiTaskObjective(spec, dataset, train_cfg, weights, seed)
