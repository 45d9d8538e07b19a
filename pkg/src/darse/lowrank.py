"""Dense real-matrix algebra: Jacobi SVD, rank-r truncation, parameter counts.

Matrices are plain 2-D ``float64`` numpy arrays. Everything here is a pure
function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError, InvalidRankError, NumericFailureError

MAX_SWEEPS = 100
_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class LayerSpec:
    """Shape of one adapted weight matrix."""

    id: int
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InvalidInputError(
                f"layer {self.id}: shape ({self.rows}, {self.cols}) must be positive"
            )

    @property
    def max_rank(self) -> int:
        return min(self.rows, self.cols)

    @property
    def params_per_rank(self) -> int:
        return self.rows + self.cols


def make_layers(shapes: Sequence[Sequence[int]]) -> list[LayerSpec]:
    """Build contiguous ``LayerSpec`` ids from a list of ``(rows, cols)``."""
    return [LayerSpec(i, int(m), int(n)) for i, (m, n) in enumerate(shapes)]


def check_layers(layers: Sequence[LayerSpec]) -> None:
    ids = [layer.id for layer in layers]
    if ids != list(range(len(layers))):
        raise InvalidInputError(f"layer ids must be 0..N-1 in order, got {ids}")


@dataclass(frozen=True, eq=False)
class LowRankFactors:
    """Adapter factors whose product ``u @ v.T`` is the low-rank update."""

    u: np.ndarray  # m x r
    v: np.ndarray  # n x r

    def __post_init__(self):
        if self.u.ndim != 2 or self.v.ndim != 2 or self.u.shape[1] != self.v.shape[1]:
            raise InvalidInputError(
                f"factor shapes {self.u.shape} and {self.v.shape} do not share a rank"
            )
        if self.rank > min(self.u.shape[0], self.v.shape[0]):
            raise InvalidRankError(
                f"rank {self.rank} exceeds min{(self.u.shape[0], self.v.shape[0])}"
            )

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[0], self.v.shape[0]

    def product(self) -> np.ndarray:
        return self.u @ self.v.T

    @classmethod
    def zero(cls, rows: int, cols: int) -> "LowRankFactors":
        return cls(np.zeros((rows, 0)), np.zeros((cols, 0)))


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate and convert ``m`` to a finite 2-D float64 array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def _complete_basis(q: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Replace the columns of ``q`` flagged in ``missing`` by unit vectors
    orthogonal to every other column."""
    m = q.shape[0]
    keep = q[:, ~missing]
    extra = []
    for k in range(m):
        if len(extra) == missing.sum():
            break
        basis = np.column_stack([keep] + extra) if (keep.shape[1] or extra) else np.zeros((m, 0))
        x = np.zeros(m)
        x[k] = 1.0
        for _ in range(2):
            x = x - basis @ (basis.T @ x)
        nrm = np.linalg.norm(x)
        if nrm > 0.1:
            extra.append(x / nrm)
    out = q.copy()
    out[:, missing] = np.column_stack(extra)
    return out


def _jacobi_tall(a: np.ndarray, max_sweeps: int):
    m, n = a.shape
    # power-of-two rescale (exact) so column products neither underflow nor overflow
    peak = float(np.max(np.abs(a))) if a.size else 0.0
    shift = math.frexp(peak)[1] if peak > 0 else 0
    w = np.ldexp(a, -shift)
    v = np.eye(n)
    tol = _EPS * m
    floor = (_EPS * np.linalg.norm(w)) ** 2
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp, wq = w[:, p], w[:, q]
                alpha = wp @ wp
                beta = wq @ wq
                gamma = wp @ wq
                if alpha <= floor or beta <= floor:
                    continue
                if abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * wp - s * wq
                w[:, q] = s * wp + c * wq
                w[:, p] = new_p
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            return w, v, shift
    raise NumericFailureError(
        f"Jacobi SVD of a {a.shape[0]}x{a.shape[1]} matrix did not converge "
        f"in {max_sweeps} sweeps"
    )


def svd(m, max_sweeps: int = MAX_SWEEPS):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``(left, spectrum, right)`` with ``left`` of shape ``(rows, k)``,
    ``right`` of shape ``(cols, k)``, ``k = min(rows, cols)`` and the spectrum
    sorted non-increasing, so that ``left @ diag(spectrum) @ right.T == m``.
    Singular values below ``max(rows, cols) * eps * sigma_max`` are reported
    as exact zeros and their left vectors are completed to an orthonormal set.
    """
    a = as_matrix(m)
    if a.shape[0] < a.shape[1]:
        right, s, left = svd(a.T, max_sweeps)
        return left, s, right

    # w stays scaled by 2**-shift until the spectrum is final
    w, v, shift = _jacobi_tall(a, max_sweeps)
    s = np.linalg.norm(w, axis=0)
    order = np.argsort(-s, kind="stable")
    s, w, v = s[order], w[:, order], v[:, order]

    cutoff = max(a.shape) * _EPS * (s[0] if s.size else 0.0)
    zero = s <= cutoff
    s = np.where(zero, 0.0, s)
    left = np.zeros_like(w)
    left[:, ~zero] = w[:, ~zero] / s[~zero]
    if zero.any():
        left = _complete_basis(left, zero)
    return left, np.ldexp(s, shift), v


def singular_values(m) -> np.ndarray:
    return svd(m)[1]


def truncated_factorization(m, r: int) -> LowRankFactors:
    """Best rank-``r`` factors, singular values split as square roots."""
    a = as_matrix(m)
    k = min(a.shape)
    if not (0 <= r <= k):
        raise InvalidRankError(f"rank {r} outside [0, {k}] for a {a.shape[0]}x{a.shape[1]} matrix")
    if r == 0:
        return LowRankFactors.zero(*a.shape)
    left, s, right = svd(a)
    root = np.sqrt(s[:r])
    return LowRankFactors(left[:, :r] * root, right[:, :r] * root)


def reconstruction_error(m, f: LowRankFactors, base=None) -> float:
    """Frobenius norm of ``m - (base + u v^T)``; a missing base counts as zero."""
    a = as_matrix(m)
    if f.shape != a.shape:
        raise InvalidInputError(f"factors of shape {f.shape} do not match matrix {a.shape}")
    residual = a - f.product()
    if base is not None:
        b = as_matrix(base, "base")
        if b.shape != a.shape:
            raise InvalidInputError(f"base shape {b.shape} does not match matrix {a.shape}")
        residual = residual - b
    return float(np.linalg.norm(residual))


def tail_energies(spectrum) -> np.ndarray:
    """``out[r] = sum_{j > r} sigma_j^2`` for ``r = 0..k``; ``out[k] == 0``."""
    sq = np.asarray(spectrum, dtype=np.float64) ** 2
    out = np.zeros(sq.size + 1)
    # reversed cumulative sum keeps small tails accurate
    out[:-1] = np.cumsum(sq[::-1])[::-1]
    return out


def param_count(ranks: Sequence[int], layers: Sequence[LayerSpec]) -> int:
    """Trainable adapter parameters: ``sum_i r_i * (m_i + n_i)``."""
    if len(ranks) != len(layers):
        raise InvalidInputError(
            f"rank vector has {len(ranks)} entries for {len(layers)} layers"
        )
    for r, layer in zip(ranks, layers):
        if not (0 <= r <= layer.max_rank):
            raise InvalidRankError(f"rank {r} outside [0, {layer.max_rank}] for layer {layer.id}")
    return sum(int(r) * layer.params_per_rank for r, layer in zip(ranks, layers))


def format_matrix(m) -> str:
    a = as_matrix(m)
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in a]
    return "\n".join(lines) + "\n"


def parse_matrix(text: str, source: str = "<string>") -> np.ndarray:
    """Parse the ``rows cols`` header plus one whitespace-separated row per line."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidInputError(f"{source}: empty matrix file")
    try:
        rows, cols = (int(tok) for tok in lines[0].split())
    except ValueError:
        raise InvalidInputError(f"{source}: bad header {lines[0]!r}, expected 'rows cols'") from None
    if len(lines) - 1 != rows:
        raise InvalidInputError(f"{source}: header says {rows} rows, found {len(lines) - 1}")
    data = []
    for lineno, ln in enumerate(lines[1:], start=2):
        try:
            row = [float(tok) for tok in ln.split()]
        except ValueError:
            raise InvalidInputError(f"{source}:{lineno}: non-numeric entry") from None
        if len(row) != cols:
            raise InvalidInputError(f"{source}:{lineno}: expected {cols} values, got {len(row)}")
        data.append(row)
    return as_matrix(np.array(data), source)


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    return parse_matrix(path.read_text(), str(path))


def write_matrix(path, m) -> None:
    Path(path).write_text(format_matrix(m))


def random_matrix(rows: int, cols: int, seed: Optional[int] = None,
                  spectrum=None) -> np.ndarray:
    """Seeded Gaussian matrix, or one with a prescribed spectrum when given."""
    rng = np.random.default_rng(seed)
    if spectrum is None:
        return rng.standard_normal((rows, cols))
    k = min(rows, cols)
    s = np.zeros(k)
    vals = np.asarray(spectrum, dtype=np.float64)[:k]
    s[: vals.size] = vals
    qa, _ = np.linalg.qr(rng.standard_normal((rows, k)))
    qb, _ = np.linalg.qr(rng.standard_normal((cols, k)))
    return (qa * s) @ qb.T
