"""Numerically stable primitives shared by every other module.

Everything here is a pure function of its inputs. Probability work is done
in log space (max-shifted) because the default temperature of 0.02 turns
cosines into logits of magnitude 50, and downstream rectification code
multiplies and partially sums the raw exponential scores.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "DimensionMismatchError",
    "ZeroNormError",
    "check_temperature",
    "as_embedding",
    "normalize",
    "cosine",
    "log_cos_exp_score",
    "cos_exp_score",
    "logsumexp",
    "log_softmax",
    "softmax_probs",
    "cosine_matrix",
    "log_softmax_rows",
]


class DimensionMismatchError(ValueError):
    """Raised when two vectors (or a vector and a registry) disagree on dimension."""


class ZeroNormError(ValueError):
    """Raised when a direction-less (zero or near-zero norm) vector is used as an embedding."""


_NORM_FLOOR = 1e-300


def check_temperature(tau: float) -> float:
    if not (tau > 0.0) or not math.isfinite(tau):
        raise ValueError(f"temperature must be a positive finite real, got {tau!r}")
    return float(tau)


def as_embedding(v, dim: int | None = None) -> np.ndarray:
    """Validate and return a 1-D float64 embedding vector.

    Checks finiteness and, when `dim` is given, the dimension. Does not
    require unit norm: rectification and finite-difference stencils evaluate
    cosines at slightly off-sphere points.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"embedding must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatchError(f"expected dimension {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding has non-finite entries")
    return arr


def normalize(v: np.ndarray) -> np.ndarray:
    """Project a vector onto the unit sphere."""
    arr = as_embedding(v)
    n = float(np.linalg.norm(arr))
    if n <= _NORM_FLOOR:
        raise ZeroNormError("cannot normalize a zero-norm vector")
    return arr / n


def cosine(a, b) -> float:
    """Cosine similarity of two vectors, in [-1, 1].

    Uses the full norm division rather than assuming unit inputs, so values
    stay exact for vectors that drift off the sphere mid-optimizer-step.
    """
    av = as_embedding(a)
    bv = as_embedding(b, dim=av.shape[0])
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na <= _NORM_FLOOR or nb <= _NORM_FLOOR:
        raise ZeroNormError("cosine undefined for zero-norm input")
    c = float(np.dot(av, bv) / (na * nb))
    # Rounding can push |c| a hair past 1; clamp so exp(c/tau) stays in range.
    return min(1.0, max(-1.0, c))


def log_cos_exp_score(a, b, tau: float) -> float:
    """Log of the cosine exponential score: cos(a, b) / tau."""
    return cosine(a, b) / check_temperature(tau)


def cos_exp_score(a, b, tau: float) -> float:
    """Unnormalized category score exp(cos(a, b) / tau); strictly positive."""
    return math.exp(log_cos_exp_score(a, b, tau))


def logsumexp(values) -> float:
    """Max-shifted log-sum-exp with compensated (fsum) accumulation.

    Accepts -inf entries (scores of categories whose shrinking factor is
    exactly zero); returns -inf only if all entries are -inf.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("logsumexp of an empty set")
    m = float(np.max(arr))
    if m == -math.inf:
        return -math.inf
    return m + math.log(math.fsum(math.exp(v - m) for v in arr.ravel()))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Log-probabilities of a 1-D logit vector (max-shifted)."""
    z = np.asarray(logits, dtype=np.float64)
    return z - logsumexp(z)


def softmax_probs(query, categories, tau: float) -> np.ndarray:
    """Temperature-scaled softmax of a query embedding over an ordered category list.

    Probabilities are strictly positive, sum to 1 within 1e-9, and are
    aligned with the order of `categories`.
    """
    tau = check_temperature(tau)
    q = as_embedding(query)
    if len(categories) == 0:
        raise ValueError("softmax over an empty category list")
    logits = np.array([cosine(q, c) / tau for c in categories])
    return np.exp(log_softmax(logits))


def cosine_matrix(queries: np.ndarray, references: np.ndarray) -> np.ndarray:
    """Pairwise cosines between row sets: (n, d) x (m, d) -> (n, m).

    Divides by both row norms, matching `cosine` exactly on every pair.
    """
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(references, dtype=np.float64)
    if q.ndim != 2 or r.ndim != 2 or q.shape[1] != r.shape[1]:
        raise DimensionMismatchError(
            f"incompatible shapes for cosine matrix: {q.shape} vs {r.shape}"
        )
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    rn = np.linalg.norm(r, axis=1, keepdims=True)
    if np.any(qn <= _NORM_FLOOR) or np.any(rn <= _NORM_FLOOR):
        raise ZeroNormError("cosine matrix undefined for zero-norm rows")
    c = (q / qn) @ (r / rn).T
    return np.clip(c, -1.0, 1.0)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise max-shifted log-softmax of a 2-D logit array."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse
