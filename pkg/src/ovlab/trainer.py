"""Training loop: combined objective, analytic gradients, SGD with momentum.

Only the context vectors and the sub-background embedding train; base
embeddings, the encoder, and the cluster centers are frozen throughout.
Gradients are analytic, chained loss -> softmax -> cosine -> encoder
transpose-Jacobian, and a patched-column central-difference oracle verifies
them. The switch in the background loss is a step discontinuity, so the
oracle freezes each proposal's branch at the stencil center and reports any
stencil that straddles the boundary instead of silently differencing
across it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .discovery import filter_background_proposals, kmeans, estimate_category_count
from .encoder import MockTextEncoder, init_context_vectors
from .losses import (
    MASS_BRANCH,
    LossBreakdown,
    ProposalBatch,
    mass_terms,
    nll_terms,
    switched_branches,
    uniform_terms,
)
from .persist import canonical_json
from .pseudo import BackgroundPartition, generate_pseudo_labels
from .synth import Scenario
from .vocab import Vocabulary, build_training_vocab

__all__ = [
    "TrainConfig",
    "Params",
    "Gradients",
    "StepRecord",
    "TrainHistory",
    "Checkpoint",
    "TrainingDivergedError",
    "NonFiniteGradientError",
    "COMPONENTS",
    "loss_final",
    "compute_gradients",
    "finite_diff_gradients",
    "sgd_step",
    "prepare_background",
    "train",
]

COMPONENTS = ("foreground", "mass", "uniform", "switched", "pseudo", "final")

CHECKPOINT_FORMAT = "ovlab-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters and module toggles of one training run.

    ``use_prompts`` gates the switched background loss; ``use_discovery``
    gates pseudo-labeling and its loss; ``baseline_mode`` drops the
    underlying block entirely, leaving the single catch-all background
    embedding of conventional heads.
    """

    learning_rate: float = 0.1
    momentum: float = 0.90
    weight_decay: float = 2.5e-5
    steps: int = 300
    batch_images: int = 4
    seed: int = 0
    temperature: float = 0.02
    relax_threshold: float = 0.02
    score_threshold: float = 0.95
    negative_weight: float = 0.05
    extra_categories: int = 10
    discovered_categories: int | None = None
    k_min: int = 2
    k_max: int = 12
    use_prompts: bool = True
    use_discovery: bool = True
    baseline_mode: bool = False
    nms_iou: float = 0.5
    gt_iou_cut: float = 0.5
    pseudo_nms_iou: float = 0.5

    def __post_init__(self):
        if self.learning_rate <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("rates must be positive (momentum/decay nonnegative)")
        if self.steps < 0 or self.batch_images < 1:
            raise ValueError("invalid step or batch configuration")


@dataclass
class Params:
    """Trainable state: one context vector per underlying category, plus the
    sub-background embedding (kept unit-norm by the optimizer)."""

    context_vectors: np.ndarray
    sub_background: np.ndarray

    def copy(self) -> "Params":
        return Params(self.context_vectors.copy(), self.sub_background.copy())


@dataclass(frozen=True)
class Gradients:
    context: np.ndarray
    sub_background: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.context.ravel(), self.sub_background])


@dataclass(frozen=True)
class StepRecord:
    step: int
    breakdown: LossBreakdown
    n_mass_branch: int
    n_uniform_branch: int
    n_pseudo_positive: int
    n_pseudo_negative: int


@dataclass(frozen=True)
class TrainHistory:
    steps: tuple[StepRecord, ...]

    def totals(self) -> dict:
        return {
            "mass_branch": sum(s.n_mass_branch for s in self.steps),
            "uniform_branch": sum(s.n_uniform_branch for s in self.steps),
            "pseudo_positive": sum(s.n_pseudo_positive for s in self.steps),
            "pseudo_negative": sum(s.n_pseudo_negative for s in self.steps),
        }


# -- objective ----------------------------------------------------------------


def _group_matrices(batch: ProposalBatch, partition: BackgroundPartition | None, vocab: Vocabulary):
    """Feature matrices and targets for each proposal group of the objective."""
    groups: dict[str, dict] = {}
    if batch.foreground:
        groups["foreground"] = {
            "features": batch.foreground_features(),
            "targets": batch.foreground_targets(vocab),
        }
    if batch.background:
        groups["background"] = {"features": batch.background_features()}
    if partition is not None and partition.positives:
        groups["pseudo_positive"] = {
            "features": np.stack([p.det_feature for p, _ in partition.positives]),
            "targets": np.array(
                [vocab.underlying_position(lab.category) for _, lab in partition.positives]
            ),
        }
    if partition is not None and partition.negatives:
        groups["pseudo_negative"] = {
            "features": np.stack([p.det_feature for p in partition.negatives])
        }
    return groups


def _group_cosines(groups: dict, vocab: Vocabulary) -> dict:
    from .core import cosine_matrix

    return {name: cosine_matrix(g["features"], vocab.embeddings) for name, g in groups.items()}


def _component_values(
    cosines: dict,
    groups: dict,
    vocab: Vocabulary,
    config: TrainConfig,
    branches: tuple[str, ...] | None,
):
    """All loss-component values (and the branch pattern) from cosine matrices.

    ``branches`` pins the switch selection; None means select from the
    current masses.
    """
    tau = config.temperature
    out = {name: 0.0 for name in COMPONENTS}
    bg_idx = vocab.background_indices()

    if "foreground" in cosines:
        vals, _ = nll_terms(cosines["foreground"] / tau, groups["foreground"]["targets"])
        out["foreground"] = float(vals.mean())

    if "background" in cosines:
        z = cosines["background"] / tau
        mass_vals, _, masses = mass_terms(z, bg_idx)
        uniform_vals, _ = uniform_terms(z, bg_idx)
        out["mass"] = float(mass_vals.mean())
        out["uniform"] = float(uniform_vals.mean())
        if branches is None:
            branches = switched_branches(masses, config.relax_threshold)
        chosen = np.where(
            np.array([b == MASS_BRANCH for b in branches]), mass_vals, uniform_vals
        )
        out["switched"] = float(chosen.mean())
    else:
        branches = ()

    pseudo = 0.0
    if "pseudo_positive" in cosines:
        vals, _ = nll_terms(
            cosines["pseudo_positive"] / tau, groups["pseudo_positive"]["targets"]
        )
        pseudo += float(vals.mean())
    if "pseudo_negative" in cosines:
        members = np.concatenate([vocab.expansion_indices(), [vocab.sub_background_index]])
        vals, _, _ = mass_terms(cosines["pseudo_negative"] / tau, members)
        pseudo += config.negative_weight * float(vals.mean())
    out["pseudo"] = pseudo

    out["final"] = (
        out["foreground"]
        + (out["switched"] if config.use_prompts else 0.0)
        + (out["pseudo"] if config.use_discovery else 0.0)
    )
    return out, branches


def loss_final(
    batch: ProposalBatch,
    vocab: Vocabulary,
    partition: BackgroundPartition | None,
    config: TrainConfig,
    forced_branches: tuple[str, ...] | None = None,
) -> LossBreakdown:
    """Combined objective of one batch; disabled toggles zero their term."""
    groups = _group_matrices(batch, partition if config.use_discovery else None, vocab)
    cosines = _group_cosines(groups, vocab)
    values, branches = _component_values(cosines, groups, vocab, config, forced_branches)
    fg = values["foreground"]
    bg = values["switched"] if config.use_prompts else 0.0
    ps = values["pseudo"] if config.use_discovery else 0.0
    return LossBreakdown(
        foreground=fg,
        background=bg,
        pseudo=ps,
        total=fg + bg + ps,
        branches=branches if config.use_prompts else (),
        n_foreground=len(batch.foreground),
        n_background=len(batch.background),
    )


# -- analytic gradients ---------------------------------------------------------


def _logit_grads(
    cosines: dict,
    groups: dict,
    vocab: Vocabulary,
    config: TrainConfig,
    component: str,
    branches: tuple[str, ...] | None,
):
    """d(component)/d(logits) per group, with every mean and weight folded in."""
    tau = config.temperature
    bg_idx = vocab.background_indices()
    grads: dict[str, np.ndarray] = {}

    want_fg = component in ("foreground", "final")
    want_bg = component in ("mass", "uniform", "switched", "final")
    want_pseudo = component in ("pseudo", "final")
    if component == "final":
        if not config.use_prompts:
            want_bg = False
        if not config.use_discovery:
            want_pseudo = False

    if want_fg and "foreground" in cosines:
        _, g = nll_terms(cosines["foreground"] / tau, groups["foreground"]["targets"])
        grads["foreground"] = g / g.shape[0]

    if want_bg and "background" in cosines:
        z = cosines["background"] / tau
        _, g_mass, masses = mass_terms(z, bg_idx)
        _, g_uniform = uniform_terms(z, bg_idx)
        if component == "mass":
            g = g_mass
        elif component == "uniform":
            g = g_uniform
        else:
            if branches is None:
                branches = switched_branches(masses, config.relax_threshold)
            sel = np.array([b == MASS_BRANCH for b in branches])
            g = np.where(sel[:, None], g_mass, g_uniform)
        grads["background"] = g / g.shape[0]

    if want_pseudo:
        if "pseudo_positive" in cosines:
            _, g = nll_terms(
                cosines["pseudo_positive"] / tau, groups["pseudo_positive"]["targets"]
            )
            grads["pseudo_positive"] = g / g.shape[0]
        if "pseudo_negative" in cosines:
            members = np.concatenate([vocab.expansion_indices(), [vocab.sub_background_index]])
            _, g, _ = mass_terms(cosines["pseudo_negative"] / tau, members)
            grads["pseudo_negative"] = g * (config.negative_weight / g.shape[0])
    return grads, branches


def _embedding_gradient(
    groups: dict, cosines: dict, logit_grads: dict, vocab: Vocabulary, tau: float
) -> np.ndarray:
    """Chain d(loss)/d(logits) through the cosine layer to d(loss)/d(embeddings)."""
    emb = vocab.embeddings
    norms = np.linalg.norm(emb, axis=1)
    ehat = emb / norms[:, None]
    total = np.zeros_like(emb)
    for name, g in logit_grads.items():
        feats = groups[name]["features"]
        fnorms = np.linalg.norm(feats, axis=1, keepdims=True)
        what = feats / fnorms
        c = cosines[name]
        total += g.T @ what - ((g * c).sum(axis=0))[:, None] * ehat
    return total / (tau * norms[:, None])


def compute_gradients(
    batch: ProposalBatch,
    vocab: Vocabulary,
    partition: BackgroundPartition | None,
    config: TrainConfig,
    component: str = "final",
) -> Gradients:
    """Exact gradient of a loss component for every enabled trainable parameter.

    Context-vector gradients chain through the encoder's transpose-Jacobian;
    the sub-background gradient is the raw embedding-space gradient (its
    cosine already accounts for the parameter's norm).
    """
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}; choose from {COMPONENTS}")
    groups = _group_matrices(batch, partition if _wants_partition(config, component) else None, vocab)
    cosines = _group_cosines(groups, vocab)
    logit_grads, _ = _logit_grads(cosines, groups, vocab, config, component, None)

    if logit_grads:
        demb = _embedding_gradient(groups, cosines, logit_grads, vocab, config.temperature)
    else:
        demb = np.zeros_like(vocab.embeddings)

    n_ctx = vocab.context_vectors.shape[0]
    under_start = vocab.underlying_slice.start
    if n_ctx:
        ctx_grad = np.stack(
            [
                vocab.encoder.encode_context_vjp(vocab.context_vectors[j], demb[under_start + j])
                for j in range(n_ctx)
            ]
        )
    else:
        ctx_grad = np.zeros_like(vocab.context_vectors)
    sub_grad = demb[vocab.sub_background_index]

    for name, arr in (("context", ctx_grad), ("sub_background", sub_grad)):
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))
            raise NonFiniteGradientError(f"non-finite gradient in {name} at {bad[0].tolist()}")
    return Gradients(context=ctx_grad, sub_background=sub_grad)


def _wants_partition(config: TrainConfig, component: str) -> bool:
    if component == "pseudo":
        return True
    return component == "final" and config.use_discovery


def feature_gradients(
    batch: ProposalBatch,
    vocab: Vocabulary,
    partition: BackgroundPartition | None,
    config: TrainConfig,
    component: str = "final",
) -> dict[str, np.ndarray]:
    """Diagnostic gradient of a loss component with respect to the detector features.

    Features are synthetic inputs, not trained parameters; this exists so the
    whole differentiation chain can be checked from the other end.
    """
    groups = _group_matrices(batch, partition if _wants_partition(config, component) else None, vocab)
    cosines = _group_cosines(groups, vocab)
    logit_grads, _ = _logit_grads(cosines, groups, vocab, config, component, None)
    emb = vocab.embeddings
    ehat = emb / np.linalg.norm(emb, axis=1)[:, None]
    out = {}
    for name, g in logit_grads.items():
        feats = groups[name]["features"]
        fnorms = np.linalg.norm(feats, axis=1, keepdims=True)
        what = feats / fnorms
        c = cosines[name]
        out[name] = ((g @ ehat) - (g * c).sum(axis=1)[:, None] * what) / (
            config.temperature * fnorms
        )
    return out


# -- finite-difference oracle ---------------------------------------------------


def central_difference(fn, x: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    The elementary stencil (f(x + h e_i) - f(x - h e_i)) / 2h: exact for
    quadratics, O(h^2) truncation error in the smooth regime.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (fn(x + step) - fn(x - step)) / (2.0 * h)
    return grad


def finite_diff_gradients(
    batch: ProposalBatch,
    vocab: Vocabulary,
    partition: BackgroundPartition | None,
    config: TrainConfig,
    h: float,
    component: str = "final",
) -> tuple[Gradients, int]:
    """Central differences over every scalar parameter, branch frozen at center.

    Perturbing one parameter changes exactly one embedding row, so each
    stencil evaluation patches a single cosine column instead of rebuilding
    the vocabulary. The switch branch of the background loss is pinned to
    the center point's selection; stencils whose live branch pattern would
    differ are counted and reported, not silently differenced across.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}")
    use_partition = partition if _wants_partition(config, component) else None
    groups = _group_matrices(batch, use_partition, vocab)
    cosines = _group_cosines(groups, vocab)
    _, center_branches = _component_values(cosines, groups, vocab, config, None)

    n_ctx = vocab.context_vectors.shape[0]
    under_start = vocab.underlying_slice.start
    flips = 0

    switch_live = component == "switched" or (component == "final" and config.use_prompts)

    def patched_value(row: int, new_emb: np.ndarray) -> tuple[float, bool]:
        patched = {}
        nn = np.linalg.norm(new_emb)
        for name, g in groups.items():
            feats = g["features"]
            fnorms = np.linalg.norm(feats, axis=1)
            col = feats @ new_emb / (fnorms * nn)
            c = cosines[name].copy()
            c[:, row] = np.clip(col, -1.0, 1.0)
            patched[name] = c
        vals, _ = _component_values(patched, groups, vocab, config, center_branches)
        flipped = False
        if switch_live and "background" in patched:
            z = patched["background"] / config.temperature
            _, _, masses = mass_terms(z, vocab.background_indices())
            flipped = switched_branches(masses, config.relax_threshold) != center_branches
        return vals[component], flipped

    ctx_grad = np.zeros_like(vocab.context_vectors)
    for j in range(n_ctx):
        v = vocab.context_vectors[j]
        for i in range(v.shape[0]):
            delta = np.zeros_like(v)
            delta[i] = h
            up, f1 = patched_value(under_start + j, vocab.encoder.encode_context(v + delta))
            dn, f2 = patched_value(under_start + j, vocab.encoder.encode_context(v - delta))
            ctx_grad[j, i] = (up - dn) / (2 * h)
            flips += int(f1 or f2)

    sub = vocab.embeddings[vocab.sub_background_index]
    sub_grad = np.zeros_like(sub)
    for i in range(sub.shape[0]):
        delta = np.zeros_like(sub)
        delta[i] = h
        up, f1 = patched_value(vocab.sub_background_index, sub + delta)
        dn, f2 = patched_value(vocab.sub_background_index, sub - delta)
        sub_grad[i] = (up - dn) / (2 * h)
        flips += int(f1 or f2)

    return Gradients(context=ctx_grad, sub_background=sub_grad), flips


# -- optimizer ------------------------------------------------------------------


def sgd_step(
    params: Params,
    grads: Gradients,
    velocity: Params,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> tuple[Params, Params]:
    """One SGD-with-momentum update; the sub-background embedding is re-projected
    onto the unit sphere afterwards."""
    if params.context_vectors.shape != grads.context.shape:
        raise ValueError(
            f"context shape mismatch: {params.context_vectors.shape} vs {grads.context.shape}"
        )
    if params.sub_background.shape != grads.sub_background.shape:
        raise ValueError("sub-background shape mismatch")
    new_vel = Params(
        context_vectors=momentum * velocity.context_vectors
        + grads.context
        + weight_decay * params.context_vectors,
        sub_background=momentum * velocity.sub_background
        + grads.sub_background
        + weight_decay * params.sub_background,
    )
    new_ctx = params.context_vectors - lr * new_vel.context_vectors
    new_sub = params.sub_background - lr * new_vel.sub_background
    new_sub = new_sub / np.linalg.norm(new_sub)
    return Params(context_vectors=new_ctx, sub_background=new_sub), new_vel


# -- training loop -----------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    """Frozen result of a run: trainable parameters plus everything needed to
    rebuild the vocabularies that scored them."""

    encoder_config: dict
    train_config: dict
    dataset_hash: str
    base_categories: tuple[tuple[int, int], ...]  # (id, name_seed)
    n_discovered: int
    context_vectors: np.ndarray
    sub_background: np.ndarray
    cluster_centers: np.ndarray | None
    rng_state: dict
    branch_totals: dict

    def to_json(self) -> str:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "encoder": self.encoder_config,
            "train_config": self.train_config,
            "dataset_hash": self.dataset_hash,
            "base": [{"id": i, "name_seed": s} for i, s in self.base_categories],
            "n_discovered": self.n_discovered,
            "context_vectors": self.context_vectors.tolist(),
            "sub_background": self.sub_background.tolist(),
            "cluster_centers": (
                self.cluster_centers.tolist() if self.cluster_centers is not None else None
            ),
            "rng_state": self.rng_state,
            "branch_totals": self.branch_totals,
            "vocabulary": self.build_vocab().records(),
        }
        return canonical_json(payload)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @staticmethod
    def load(path) -> "Checkpoint":
        rec = json.loads(Path(path).read_text(encoding="utf-8"))
        if rec.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a checkpoint file: {rec.get('format')!r}")
        if rec.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {rec.get('version')}")
        centers = rec["cluster_centers"]
        return Checkpoint(
            encoder_config=rec["encoder"],
            train_config=rec["train_config"],
            dataset_hash=rec["dataset_hash"],
            base_categories=tuple((r["id"], r["name_seed"]) for r in rec["base"]),
            n_discovered=rec["n_discovered"],
            context_vectors=np.asarray(rec["context_vectors"], dtype=np.float64),
            sub_background=np.asarray(rec["sub_background"], dtype=np.float64),
            cluster_centers=(
                np.asarray(centers, dtype=np.float64) if centers is not None else None
            ),
            rng_state=rec["rng_state"],
            branch_totals=rec["branch_totals"],
        )

    def config_obj(self) -> TrainConfig:
        return TrainConfig(**self.train_config)

    def encoder_obj(self) -> MockTextEncoder:
        return MockTextEncoder(**self.encoder_config)

    def build_vocab(self) -> Vocabulary:
        enc = self.encoder_obj()
        base_ids = [i for i, _ in self.base_categories]
        base_emb = np.stack([enc.encode_named_category(s) for _, s in self.base_categories])
        return build_training_vocab(
            base_ids,
            base_emb,
            self.context_vectors,
            self.sub_background,
            enc,
            n_discovered=self.n_discovered,
            baseline_mode=self.config_obj().baseline_mode,
        )


def prepare_background(scenario: Scenario, config: TrainConfig):
    """Offline prep: pooled filtered background features, latent count, centers.

    Runs once before the loop. The count comes from the silhouette sweep
    unless the configuration pins it; centers are computed only when the
    discovery loss is enabled, and stay frozen for the whole run.
    """
    if config.baseline_mode:
        return 0, None
    feats = []
    for image in scenario.train_images:
        bg = [p for p in image.proposals if p.gt_label is None]
        kept = filter_background_proposals(
            bg,
            image.gt_boxes,
            theta=config.score_threshold,
            gt_iou_cut=config.gt_iou_cut,
            nms_iou=config.nms_iou,
        )
        feats.extend(p.img_feature for p in kept)
    if not feats:
        raise ValueError("no background proposals survive filtering; cannot size the vocabulary")
    features = np.stack(feats)
    if config.discovered_categories is not None:
        n_disc = config.discovered_categories
    else:
        k_max = min(config.k_max, features.shape[0])
        n_disc = estimate_category_count(features, config.k_min, k_max, config.seed).count
    centers = None
    if config.use_discovery:
        centers = kmeans(features, n_disc, seed=config.seed).centers
    return n_disc, centers


def _sample_batch(rng, scenario: Scenario, config: TrainConfig):
    n = len(scenario.train_images)
    k = min(config.batch_images, n)
    idx = rng.choice(n, size=k, replace=False)
    images = [scenario.train_images[i] for i in sorted(idx)]
    fg, bg = [], []
    for image in images:
        fg.extend(p for p in image.proposals if p.gt_label is not None)
        bg.extend(p for p in image.proposals if p.gt_label is None)
    return images, ProposalBatch(foreground=tuple(fg), background=tuple(bg))


def _batch_partition(images, centers, config: TrainConfig) -> BackgroundPartition:
    positives, negatives = [], []
    for image in images:
        bg = [p for p in image.proposals if p.gt_label is None]
        part = generate_pseudo_labels(
            bg,
            image.gt_boxes,
            centers,
            tau=config.temperature,
            theta=config.score_threshold,
            nms_iou=config.pseudo_nms_iou,
            gt_iou_cut=config.gt_iou_cut,
            rpn_nms_iou=config.nms_iou,
        )
        positives.extend(part.positives)
        negatives.extend(part.negatives)
    return BackgroundPartition(positives=tuple(positives), negatives=tuple(negatives))


def initial_params(config: TrainConfig, encoder: MockTextEncoder, n_discovered: int) -> Params:
    """Seeded initialization: Gaussian context vectors, random unit sub-background."""
    n_under = 0 if config.baseline_mode else n_discovered + config.extra_categories
    if n_under:
        ctx = init_context_vectors(n_under, config.seed, encoder.ctx_dim)
    else:
        ctx = np.zeros((0, encoder.ctx_dim))
    rng = np.random.default_rng([6, config.seed])
    sub = rng.standard_normal(encoder.dim)
    sub /= np.linalg.norm(sub)
    return Params(context_vectors=ctx, sub_background=sub)


def train(config: TrainConfig, scenario: Scenario) -> tuple[TrainHistory, Checkpoint]:
    """Deterministic training over a scenario; returns the history and checkpoint.

    Per step: sample a batch of images, rebuild the vocabulary from the live
    parameters, pseudo-label the batch (when discovery is on), evaluate the
    objective, backpropagate analytically, and apply one SGD step. Frozen
    components (encoder, base embeddings, centers) are never touched.
    """
    encoder = MockTextEncoder(**scenario.encoder_config)
    base_ids = list(scenario.base_ids)
    base_emb = np.stack(
        [encoder.encode_named_category(scenario.name_seeds[i]) for i in base_ids]
    )
    n_discovered, centers = prepare_background(scenario, config)
    params = initial_params(config, encoder, n_discovered)
    velocity = Params(
        context_vectors=np.zeros_like(params.context_vectors),
        sub_background=np.zeros_like(params.sub_background),
    )
    rng = np.random.default_rng([5, config.seed])
    records: list[StepRecord] = []

    for step in range(config.steps):
        images, batch = _sample_batch(rng, scenario, config)
        vocab = build_training_vocab(
            base_ids,
            base_emb,
            params.context_vectors,
            params.sub_background,
            encoder,
            n_discovered=n_discovered,
            baseline_mode=config.baseline_mode,
        )
        partition = None
        if config.use_discovery and centers is not None:
            partition = _batch_partition(images, centers, config)
        breakdown = loss_final(batch, vocab, partition, config)
        if not math.isfinite(breakdown.total):
            raise TrainingDivergedError(f"non-finite loss at step {step}: {breakdown}")
        grads = compute_gradients(batch, vocab, partition, config)
        params, velocity = sgd_step(
            params,
            grads,
            velocity,
            lr=config.learning_rate,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        records.append(
            StepRecord(
                step=step,
                breakdown=breakdown,
                n_mass_branch=sum(b == MASS_BRANCH for b in breakdown.branches),
                n_uniform_branch=sum(b != MASS_BRANCH for b in breakdown.branches),
                n_pseudo_positive=len(partition.positives) if partition else 0,
                n_pseudo_negative=len(partition.negatives) if partition else 0,
            )
        )

    history = TrainHistory(steps=tuple(records))
    checkpoint = Checkpoint(
        encoder_config=encoder.config(),
        train_config=asdict(config),
        dataset_hash=scenario.dataset_hash(),
        base_categories=tuple((i, scenario.name_seeds[i]) for i in base_ids),
        n_discovered=n_discovered,
        context_vectors=params.context_vectors.copy(),
        sub_background=params.sub_background.copy(),
        cluster_centers=centers.copy() if centers is not None else None,
        rng_state=json.loads(canonical_json(rng.bit_generator.state)),
        branch_totals=history.totals(),
    )
    return history, checkpoint


def history_to_json(history: TrainHistory) -> str:
    rows = [
        {
            "step": s.step,
            "foreground": s.breakdown.foreground,
            "background": s.breakdown.background,
            "pseudo": s.breakdown.pseudo,
            "total": s.breakdown.total,
            "mass_branch": s.n_mass_branch,
            "uniform_branch": s.n_uniform_branch,
            "pseudo_positive": s.n_pseudo_positive,
            "pseudo_negative": s.n_pseudo_negative,
        }
        for s in history.steps
    ]
    return canonical_json({"steps": rows, "totals": history.totals()})
