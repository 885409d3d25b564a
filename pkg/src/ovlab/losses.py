"""Classification losses for the prompt-learning head.

Four components over a batch of proposals scored against the training
vocabulary:

* foreground cross-entropy on annotated proposals;
* a background-mass loss that raises the summed probability of the
  underlying-plus-sub-background block for each unlabeled proposal;
* a relaxed variant that spreads the pull uniformly over that block; and
* the switched loss that picks, per proposal, mass or relaxed depending on
  whether the block's current probability mass clears a threshold.

Every component has a ``*_terms`` companion returning the per-proposal
values together with the derivative of each value with respect to that
proposal's logits; the trainer chains those through the cosine layer and
the encoder. All means are over proposals, so duplicating a batch leaves
every loss unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import check_temperature, cosine_matrix, log_softmax_rows
from .discovery import Proposal
from .vocab import Vocabulary

__all__ = [
    "MASS_BRANCH",
    "UNIFORM_BRANCH",
    "ProposalBatch",
    "LossBreakdown",
    "batch_logits",
    "background_mass",
    "foreground_loss",
    "background_mass_loss",
    "relaxed_background_loss",
    "switched_background_loss",
]

MASS_BRANCH = "mass"
UNIFORM_BRANCH = "uniform"


@dataclass(frozen=True)
class ProposalBatch:
    """Foreground (annotated) and background (everything else) proposals of one step."""

    foreground: tuple[Proposal, ...]
    background: tuple[Proposal, ...]

    def __post_init__(self):
        for p in self.foreground:
            if p.gt_label is None:
                raise ValueError("foreground proposals must carry a base label")
        for p in self.background:
            if p.gt_label is not None:
                raise ValueError("background proposals must not carry a base label")

    @staticmethod
    def _features(proposals) -> np.ndarray:
        return np.stack([p.det_feature for p in proposals])

    def foreground_features(self) -> np.ndarray:
        return self._features(self.foreground)

    def background_features(self) -> np.ndarray:
        return self._features(self.background)

    def foreground_targets(self, vocab: Vocabulary) -> np.ndarray:
        return np.array([vocab.base_position(p.gt_label) for p in self.foreground], dtype=np.int64)


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss components of one batch; total = foreground + background + pseudo."""

    foreground: float
    background: float
    pseudo: float
    total: float
    branches: tuple[str, ...]
    n_foreground: int
    n_background: int


def batch_logits(features: np.ndarray, vocab: Vocabulary, tau: float) -> np.ndarray:
    """Per-proposal logits: cosines against every vocabulary embedding, over tau."""
    tau = check_temperature(tau)
    return cosine_matrix(features, vocab.embeddings) / tau


def background_mass(probs, vocab: Vocabulary) -> float:
    """Summed probability of the underlying block plus the sub-background slot.

    ``probs`` must be a probability vector aligned with the vocabulary order.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (vocab.size,):
        raise ValueError(f"probability vector of length {p.shape} does not match vocabulary size {vocab.size}")
    return float(p[vocab.background_indices()].sum())


# -- per-proposal terms (value plus d value / d logits) -----------------------


def nll_terms(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """-log p(target) per row, with its logit gradient p - onehot(target)."""
    logp = log_softmax_rows(logits)
    rows = np.arange(logits.shape[0])
    values = -logp[rows, targets]
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    return values, grad


def mass_terms(
    logits: np.ndarray, member_indices: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """-log of the member-set probability mass per row, its gradient, and the mass.

    Gradient per row: p - q, where q renormalizes p over the member set.
    """
    logp = log_softmax_rows(logits)
    member_logp = logp[:, member_indices]
    shift = member_logp.max(axis=1, keepdims=True)
    log_mass = (np.log(np.exp(member_logp - shift).sum(axis=1, keepdims=True)) + shift).ravel()
    values = -log_mass
    grad = np.exp(logp)
    grad[:, member_indices] -= np.exp(member_logp - log_mass[:, None])
    return values, grad, np.exp(log_mass)


def uniform_terms(
    logits: np.ndarray, member_indices: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Mean of -log p(c) over the member set per row, with gradient p - uniform(set)."""
    logp = log_softmax_rows(logits)
    k = len(member_indices)
    values = -logp[:, member_indices].mean(axis=1)
    grad = np.exp(logp)
    grad[:, member_indices] -= 1.0 / k
    return values, grad


# -- batch-level losses -------------------------------------------------------


def foreground_loss(batch: ProposalBatch, vocab: Vocabulary, tau: float) -> float:
    """Mean cross-entropy of annotated proposals against their base category.

    Returns 0 for an empty foreground set (LossBreakdown records the count).
    """
    if not batch.foreground:
        return 0.0
    logits = batch_logits(batch.foreground_features(), vocab, tau)
    values, _ = nll_terms(logits, batch.foreground_targets(vocab))
    return float(values.mean())


def background_mass_loss(batch: ProposalBatch, vocab: Vocabulary, tau: float) -> float:
    """Mean over background proposals of -log(background block mass)."""
    if not batch.background:
        return 0.0
    logits = batch_logits(batch.background_features(), vocab, tau)
    values, _, _ = mass_terms(logits, vocab.background_indices())
    return float(values.mean())


def relaxed_background_loss(batch: ProposalBatch, vocab: Vocabulary, tau: float) -> float:
    """Mean over background proposals of the uniform pull toward the background block."""
    if not batch.background:
        return 0.0
    logits = batch_logits(batch.background_features(), vocab, tau)
    values, _ = uniform_terms(logits, vocab.background_indices())
    return float(values.mean())


def switched_branches(masses: np.ndarray, gamma: float) -> tuple[str, ...]:
    """Mass branch where the block mass clears gamma (inclusive), uniform otherwise."""
    return tuple(MASS_BRANCH if m >= gamma else UNIFORM_BRANCH for m in masses)


def switched_background_loss(
    batch: ProposalBatch,
    vocab: Vocabulary,
    tau: float,
    gamma: float,
    forced_branches: tuple[str, ...] | None = None,
) -> tuple[float, tuple[str, ...]]:
    """Per-proposal switch between the mass loss and the relaxed loss.

    A proposal whose background mass is at least gamma (inclusive) takes the
    mass branch; otherwise the relaxed branch. The endpoints are admitted so
    the degenerate identities are expressible: at 0 every proposal takes the
    mass branch, at 1 only proposals with full background mass do.
    ``forced_branches`` pins the selection regardless of the current mass —
    finite-difference stencils use it to avoid differencing across the switch
    discontinuity.
    """
    if not (0.0 <= gamma <= 1.0) and forced_branches is None:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if not batch.background:
        return 0.0, ()
    logits = batch_logits(batch.background_features(), vocab, tau)
    bg_idx = vocab.background_indices()
    mass_vals, _, masses = mass_terms(logits, bg_idx)
    uniform_vals, _ = uniform_terms(logits, bg_idx)
    if forced_branches is None:
        branches = switched_branches(masses, gamma)
    else:
        if len(forced_branches) != len(batch.background):
            raise ValueError("forced_branches must match the background count")
        branches = tuple(forced_branches)
    per = np.where(
        np.array([b == MASS_BRANCH for b in branches]), mass_vals, uniform_vals
    )
    return float(per.mean()), branches
