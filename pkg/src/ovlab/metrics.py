"""Proposal-level evaluation metrics and the module-toggle ablation runner.

Metrics are classification-style: each held-out proposal is scored against
the inference vocabulary and predicted as its best foreground category, or
as background when the background mass beats every foreground probability.
Localization is synthetic here, so box-matching average precision is out of
scope; the signal of interest lives entirely in the classification head.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, replace

import numpy as np

from .persist import canonical_json
from .rectify import compute_shrinking_factors, inference_probs
from .synth import Scenario
from .trainer import Checkpoint, TrainConfig, TrainHistory, train
from .vocab import build_inference_vocab

__all__ = ["EvalReport", "AblationCombo", "AblationSpec", "STANDARD_COMBOS", "evaluate", "run_ablation"]

BACKGROUND_KEY = "background"


@dataclass(frozen=True)
class EvalReport:
    """Classification metrics of one checkpoint over one held-out split."""

    novel_top1: float
    base_top1: float
    novel_recall: float
    recall_threshold: float
    rectified: bool
    mean_shrinking_factor: float
    confusion: dict
    branch_histogram: dict
    n_novel: int
    n_base: int
    n_background: int

    def validate(self) -> None:
        for name, acc in (("novel_top1", self.novel_top1), ("base_top1", self.base_top1),
                          ("novel_recall", self.novel_recall)):
            if not (0.0 <= acc <= 1.0):
                raise ValueError(f"{name}={acc} outside [0, 1]")
        # Confusion rows must account for every instance exactly once.
        total = sum(sum(row.values()) for row in self.confusion.values())
        if total != self.n_novel + self.n_base + self.n_background:
            raise ValueError(
                f"confusion total {total} != instance total "
                f"{self.n_novel + self.n_base + self.n_background}"
            )

    def to_json(self) -> str:
        return canonical_json(asdict(self))

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        rec = json.loads(text)
        return EvalReport(**rec)

    def render(self) -> str:
        lines = [
            f"novel top-1      {self.novel_top1:.4f}   ({self.n_novel} proposals)",
            f"base top-1       {self.base_top1:.4f}   ({self.n_base} proposals)",
            f"novel recall     {self.novel_recall:.4f}   (prob >= {self.recall_threshold})",
            f"rectified        {self.rectified}",
            f"mean shrink      {self.mean_shrinking_factor:.4f}",
            f"background count {self.n_background}",
        ]
        if any(self.branch_histogram.values()):
            lines.append(f"branch usage     {self.branch_histogram!r}")
        return "\n".join(lines)


def evaluate(
    checkpoint: Checkpoint,
    scenario: Scenario,
    rectify: bool = True,
    recall_threshold: float = 0.5,
    history: TrainHistory | None = None,
) -> EvalReport:
    """Score every held-out proposal and compare against the oracle labels.

    Never mutates the checkpoint or the dataset. The novel block is built
    from the scenario's oracle registry; the shrinking factors are computed
    once and shared across proposals.
    """
    encoder = checkpoint.encoder_obj()
    if encoder.dim != scenario.config.dim:
        raise ValueError(
            f"checkpoint dimension {encoder.dim} != dataset dimension {scenario.config.dim}"
        )
    if set(i for i, _ in checkpoint.base_categories) != set(scenario.base_ids):
        raise ValueError("checkpoint base categories do not match the dataset")
    tau = checkpoint.config_obj().temperature

    train_vocab = checkpoint.build_vocab()
    novel_emb = (
        np.stack([encoder.encode_named_category(scenario.name_seeds[i]) for i in scenario.novel_ids])
        if scenario.novel_ids
        else np.zeros((0, encoder.dim))
    )
    vocab = build_inference_vocab(train_vocab, scenario.novel_ids, novel_emb)
    factors = compute_shrinking_factors(vocab, tau)

    fg_ids = list(vocab.base_ids) + list(vocab.novel_ids)
    base_set = set(scenario.base_ids)
    novel_set = set(scenario.novel_ids)

    confusion: dict[str, dict[str, int]] = {}
    hits = {"base": 0, "novel": 0}
    totals = {"base": 0, "novel": 0, "background": 0}
    recalled = 0

    for image in scenario.eval_images:
        for p in image.proposals:
            label = p.oracle.generative_label if p.oracle else None
            if label in base_set:
                true_key, kind = str(label), "base"
            elif label in novel_set:
                true_key, kind = str(label), "novel"
            else:
                true_key, kind = BACKGROUND_KEY, "background"
            totals[kind] += 1

            scores = inference_probs(p.det_feature, vocab, tau, rectify=rectify, factors=factors)
            best = int(np.argmax(scores.probabilities)) if len(fg_ids) else -1
            best_prob = float(scores.probabilities[best]) if best >= 0 else 0.0
            if best < 0 or scores.background_mass > best_prob:
                pred_key = BACKGROUND_KEY
            else:
                pred_key = str(fg_ids[best])

            confusion.setdefault(true_key, {})
            confusion[true_key][pred_key] = confusion[true_key].get(pred_key, 0) + 1
            if kind in ("base", "novel") and pred_key == true_key:
                hits[kind] += 1
                if kind == "novel" and best_prob >= recall_threshold:
                    recalled += 1

    report = EvalReport(
        novel_top1=hits["novel"] / totals["novel"] if totals["novel"] else 0.0,
        base_top1=hits["base"] / totals["base"] if totals["base"] else 0.0,
        novel_recall=recalled / totals["novel"] if totals["novel"] else 0.0,
        recall_threshold=recall_threshold,
        rectified=bool(rectify),
        mean_shrinking_factor=float(factors.mean()) if factors.size else 1.0,
        confusion=confusion,
        branch_histogram=(history.totals() if history is not None else dict(checkpoint.branch_totals)),
        n_novel=totals["novel"],
        n_base=totals["base"],
        n_background=totals["background"],
    )
    report.validate()
    return report


# -- ablation -------------------------------------------------------------------


@dataclass(frozen=True)
class AblationCombo:
    """One module-toggle combination plus its inference-time rectify flag."""

    name: str
    baseline_mode: bool
    use_prompts: bool
    use_discovery: bool
    rectify: bool

    def train_key(self) -> tuple:
        return (self.baseline_mode, self.use_prompts, self.use_discovery)


STANDARD_COMBOS = (
    AblationCombo("baseline", baseline_mode=True, use_prompts=True, use_discovery=False, rectify=False),
    AblationCombo("prompts", baseline_mode=False, use_prompts=True, use_discovery=False, rectify=False),
    AblationCombo("discovery", baseline_mode=False, use_prompts=False, use_discovery=True, rectify=False),
    AblationCombo("prompts+rectify", baseline_mode=False, use_prompts=True, use_discovery=False, rectify=True),
    AblationCombo("discovery+rectify", baseline_mode=False, use_prompts=False, use_discovery=True, rectify=True),
    AblationCombo("full", baseline_mode=False, use_prompts=True, use_discovery=True, rectify=True),
)


@dataclass(frozen=True)
class AblationSpec:
    combos: tuple[AblationCombo, ...] = STANDARD_COMBOS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9)


@dataclass(frozen=True)
class AblationResult:
    rows: tuple[dict, ...]

    def to_json(self) -> str:
        return canonical_json({"rows": list(self.rows)})

    def render(self) -> str:
        header = f"{'combination':<20} {'novel top-1 (median)':>21} {'base top-1 (median)':>20}"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            lines.append(
                f"{row['name']:<20} {row['novel_top1_median']:>21.4f} {row['base_top1_median']:>20.4f}"
            )
        return "\n".join(lines)


def run_ablation(
    spec: AblationSpec, scenario: Scenario, base_config: TrainConfig | None = None
) -> AblationResult:
    """Train/evaluate every toggle combination on identical data and seeds.

    Combinations sharing training toggles reuse the trained checkpoint and
    differ only in the rectify flag, mirroring how rectification is purely
    an inference-time change.
    """
    base_config = base_config or TrainConfig()
    cache: dict[tuple, Checkpoint] = {}
    rows = []
    for combo in spec.combos:
        novel_scores, base_scores = [], []
        for seed in spec.seeds:
            key = combo.train_key() + (seed,)
            if key not in cache:
                config = replace(
                    base_config,
                    seed=seed,
                    baseline_mode=combo.baseline_mode,
                    use_prompts=combo.use_prompts,
                    use_discovery=combo.use_discovery,
                )
                _, checkpoint = train(config, scenario)
                cache[key] = checkpoint
            report = evaluate(cache[key], scenario, rectify=combo.rectify)
            novel_scores.append(report.novel_top1)
            base_scores.append(report.base_top1)
        rows.append(
            {
                "name": combo.name,
                "baseline_mode": combo.baseline_mode,
                "use_prompts": combo.use_prompts,
                "use_discovery": combo.use_discovery,
                "rectify": combo.rectify,
                "seeds": list(spec.seeds),
                "novel_top1": novel_scores,
                "base_top1": base_scores,
                "novel_top1_median": statistics.median(novel_scores),
                "base_top1_median": statistics.median(base_scores),
            }
        )
    return AblationResult(rows=tuple(rows))
