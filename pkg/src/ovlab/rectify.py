"""Inference-time probability rectification.

At inference the vocabulary contains both the revealed novel categories and
the underlying background categories learned during training. Where those
two blocks describe the same concept, the shared denominator of the softmax
double-counts the concept's score and deflates every foreground
probability. The fix: scale each underlying category's raw score by one
minus the conditional probability mass it shares with the novel block
(estimated from embedding-space similarity alone, so it is a property of
the vocabulary, not of any proposal), then re-run the softmax with the
shrunken underlying sum.

Raw scores at the default temperature span dozens of orders of magnitude,
so every sum here is formed in log space with compensated accumulation and
mirrored back to linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import check_temperature, cosine_matrix, logsumexp
from .vocab import CategoryId, Kind, Vocabulary

__all__ = [
    "PartialSums",
    "RectifiedScores",
    "partial_sums",
    "conditional_prob",
    "shrinking_factor",
    "compute_shrinking_factors",
    "rectified_underlying_sum",
    "inference_probs",
    "rectification_report",
]


@dataclass(frozen=True)
class PartialSums:
    """Block sums of the raw exponential scores, in log domain with linear mirrors.

    foreground covers the base and novel blocks together; underlying covers
    the context-backed block; sub_background is the final slot's score.
    """

    log_foreground: float
    log_underlying: float
    log_sub_background: float

    @property
    def foreground(self) -> float:
        return math.exp(self.log_foreground)

    @property
    def underlying(self) -> float:
        return math.exp(self.log_underlying) if self.log_underlying != -math.inf else 0.0

    @property
    def log_denominator(self) -> float:
        return logsumexp([self.log_foreground, self.log_underlying, self.log_sub_background])

    @property
    def sub_background(self) -> float:
        return math.exp(self.log_sub_background)

    @property
    def denominator(self) -> float:
        return math.exp(self.log_denominator)


@dataclass(frozen=True)
class RectifiedScores:
    """Inference probabilities for the foreground blocks plus rectification details.

    ``probabilities`` is aligned with [base block, novel block]. The
    ``underlying_sum`` is the (possibly shrunken) underlying-block score sum
    actually used in the denominator, mirrored from log domain.
    """

    probabilities: np.ndarray
    shrinking_factors: np.ndarray
    underlying_sum: float
    background_mass: float
    rectified: bool


def _require_inference(vocab: Vocabulary) -> None:
    if not vocab.inference:
        raise ValueError(
            "inference vocabulary required (build_inference_vocab registers the novel block)"
        )


def _block_logits(query, vocab: Vocabulary, tau: float) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    return cosine_matrix(q[None, :], vocab.embeddings)[0] / tau


def partial_sums(query, vocab: Vocabulary, tau: float) -> PartialSums:
    """Log-domain block sums of exp(cos/tau) against an inference vocabulary."""
    tau = check_temperature(tau)
    _require_inference(vocab)
    z = _block_logits(query, vocab, tau)
    fg = z[vocab.foreground_slice]
    under = z[vocab.underlying_slice]
    return PartialSums(
        log_foreground=logsumexp(fg) if fg.size else -math.inf,
        log_underlying=logsumexp(under) if under.size else -math.inf,
        log_sub_background=float(z[vocab.sub_background_index]),
    )


def _position(vocab: Vocabulary, cat: CategoryId) -> int:
    if cat.kind is Kind.NOVEL:
        return vocab.novel_slice.start + vocab.novel_ids.index(cat.index)
    if cat.kind is Kind.UNDERLYING:
        if not (0 <= cat.index < vocab.n_underlying):
            raise IndexError(f"underlying index {cat.index} out of range")
        return vocab.underlying_slice.start + cat.index
    if cat.kind is Kind.BASE:
        return vocab.base_position(cat.index)
    return vocab.sub_background_index


def conditional_prob(
    c_novel: CategoryId, c_underlying: CategoryId, vocab: Vocabulary, tau: float
) -> float:
    """Probability that an underlying category's concept is the given novel one.

    Sample-agnostic: computed purely from embedding similarities, as the
    underlying embedding's score for the novel embedding normalized over
    every other category in the inference vocabulary.
    """
    tau = check_temperature(tau)
    _require_inference(vocab)
    if c_novel.kind is not Kind.NOVEL:
        raise ValueError(f"first argument must be a novel category, got {c_novel.kind}")
    if c_underlying.kind is not Kind.UNDERLYING:
        raise ValueError(
            f"second argument must be an underlying category, got {c_underlying.kind}"
        )
    anchor_pos = _position(vocab, c_underlying)
    novel_pos = _position(vocab, c_novel)
    z = _block_logits(vocab.embeddings[anchor_pos], vocab, tau)
    others = np.delete(np.arange(vocab.size), anchor_pos)
    return math.exp(z[novel_pos] - logsumexp(z[others]))


def compute_shrinking_factors(vocab: Vocabulary, tau: float) -> np.ndarray:
    """Per-underlying-category factor 1 - (conditional mass shared with the novel block).

    Depends only on the vocabulary, so callers compute it once per inference
    session and reuse it for every proposal.
    """
    tau = check_temperature(tau)
    _require_inference(vocab)
    n_under = vocab.n_underlying
    if n_under == 0:
        return np.zeros(0)
    cos = cosine_matrix(vocab.embeddings[vocab.underlying_slice], vocab.embeddings)
    z = cos / tau
    under_start = vocab.underlying_slice.start
    novel = vocab.novel_slice
    factors = np.empty(n_under)
    for i in range(n_under):
        others = np.delete(np.arange(vocab.size), under_start + i)
        denom = logsumexp(z[i, others])
        if novel.stop == novel.start:
            factors[i] = 1.0
            continue
        shared = math.exp(logsumexp(z[i, novel]) - denom)
        factors[i] = min(1.0, max(0.0, 1.0 - shared))
    return factors


def shrinking_factor(c_underlying: CategoryId, vocab: Vocabulary, tau: float) -> float:
    """Factor in [0, 1] scaling one underlying category's score at inference."""
    if c_underlying.kind is not Kind.UNDERLYING:
        raise ValueError(
            f"expected an underlying category, got {c_underlying.kind}"
        )
    return float(compute_shrinking_factors(vocab, tau)[c_underlying.index])


def _log_shrunk_underlying(z_under: np.ndarray, factors: np.ndarray) -> float:
    """log sum of score * factor over the underlying block; -inf when empty or all zero."""
    if z_under.size == 0:
        return -math.inf
    with np.errstate(divide="ignore"):
        log_terms = z_under + np.log(factors)
    return logsumexp(log_terms)


def rectified_underlying_sum(
    query, vocab: Vocabulary, tau: float, factors: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Underlying-block score sum with each term shrunk by its factor."""
    tau = check_temperature(tau)
    _require_inference(vocab)
    if factors is None:
        factors = compute_shrinking_factors(vocab, tau)
    z = _block_logits(query, vocab, tau)
    log_sum = _log_shrunk_underlying(z[vocab.underlying_slice], factors)
    return (math.exp(log_sum) if log_sum != -math.inf else 0.0), factors


def inference_probs(
    query,
    vocab: Vocabulary,
    tau: float,
    rectify: bool = True,
    factors: np.ndarray | None = None,
) -> RectifiedScores:
    """Foreground probabilities of one proposal, optionally rectified.

    Each base/novel category's probability is its raw score over the
    denominator (foreground sum + underlying sum + sub-background score);
    with ``rectify`` the underlying sum is the factor-shrunken one, which can
    only raise foreground probabilities.
    """
    tau = check_temperature(tau)
    _require_inference(vocab)
    if factors is None and rectify:
        factors = compute_shrinking_factors(vocab, tau)
    elif factors is None:
        factors = np.ones(vocab.n_underlying)
    z = _block_logits(query, vocab, tau)
    z_under = z[vocab.underlying_slice]
    if rectify:
        log_under = _log_shrunk_underlying(z_under, factors)
    else:
        log_under = logsumexp(z_under) if z_under.size else -math.inf
    log_sub = float(z[vocab.sub_background_index])
    fg = z[vocab.foreground_slice]
    parts = [log_under, log_sub]
    if fg.size:
        parts.append(logsumexp(fg))
    log_denom = logsumexp(parts)
    probs = np.exp(fg - log_denom)
    bg_mass = math.exp(logsumexp([log_under, log_sub]) - log_denom)
    return RectifiedScores(
        probabilities=probs,
        shrinking_factors=np.array(factors, dtype=np.float64),
        underlying_sum=math.exp(log_under) if log_under != -math.inf else 0.0,
        background_mass=bg_mass,
        rectified=bool(rectify),
    )


def rectification_report(vocab: Vocabulary, tau: float, queries) -> dict:
    """Per-category factors plus (unrectified, rectified) probability pairs per query."""
    factors = compute_shrinking_factors(vocab, tau)
    rows = []
    for i, q in enumerate(np.asarray(queries, dtype=np.float64)):
        plain = inference_probs(q, vocab, tau, rectify=False, factors=np.ones_like(factors))
        fixed = inference_probs(q, vocab, tau, rectify=True, factors=factors)
        rows.append(
            {
                "proposal": i,
                "unrectified": plain.probabilities.tolist(),
                "rectified": fixed.probabilities.tolist(),
                "background_mass_unrectified": plain.background_mass,
                "background_mass_rectified": fixed.background_mass,
            }
        )
    return {
        "shrinking_factors": factors.tolist(),
        "mean_shrinking_factor": float(factors.mean()) if factors.size else 1.0,
        "proposals": rows,
    }
