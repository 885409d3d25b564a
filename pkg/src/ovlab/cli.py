"""Command-line surface: scenario generation, training, evaluation, reports.

One JSON configuration file drives every command; individual keys can be
overridden on the command line with ``--set section.key=value`` and every
command accepts ``--seed``. All artifacts are written deterministically so
reruns with identical configuration are byte-identical, and each output
directory gets a manifest listing its artifacts with content hashes.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .discovery import estimate_category_count, filter_background_proposals
from .encoder import MockTextEncoder, init_context_vectors
from .metrics import STANDARD_COMBOS, AblationSpec, evaluate, run_ablation
from .losses import ProposalBatch
from .persist import canonical_json, config_hash, sha256_file, write_text
from .pseudo import BackgroundPartition, PseudoLabel
from .rectify import rectification_report
from .synth import ScenarioConfig, generate_scenario, load_dataset, write_dataset
from .trainer import (
    Checkpoint,
    TrainConfig,
    compute_gradients,
    finite_diff_gradients,
    history_to_json,
    train,
)
from .vocab import build_training_vocab

GRADCHECK_TOLERANCES = {1.0: 1e-5, 0.05: 1e-4}


def _dataclass_from_dict(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def load_config(path: str | None, overrides: list[str], seed: int | None) -> dict:
    """Merge the config file, --set overrides, and the --seed shorthand."""
    config: dict = {}
    if path:
        config = json.loads(Path(path).read_text(encoding="utf-8"))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    if seed is not None:
        config.setdefault("scenario", {})["seed"] = seed
        config.setdefault("train", {})["seed"] = seed
        config.setdefault("gradcheck", {})["seed"] = seed
    return config


def _scenario_config(config: dict) -> ScenarioConfig:
    data = dict(config.get("scenario", {}))
    if "hidden_weights" in data and data["hidden_weights"] is not None:
        data["hidden_weights"] = tuple(data["hidden_weights"])
    return _dataclass_from_dict(ScenarioConfig, data)


def _encoder(config: dict) -> MockTextEncoder:
    return MockTextEncoder(**{"seed": 7, **config.get("encoder", {})})


def _train_config(config: dict) -> TrainConfig:
    return _dataclass_from_dict(TrainConfig, dict(config.get("train", {})))


def _write_manifest(out_dir: Path, extra: dict | None = None) -> None:
    artifacts = sorted(
        p.name for p in out_dir.iterdir() if p.is_file() and p.name != "manifest.json"
    )
    payload = {
        "artifacts": [{"path": name, "sha256": sha256_file(out_dir / name)} for name in artifacts],
    }
    if extra:
        payload.update(extra)
    write_text(out_dir / "manifest.json", canonical_json(payload) + "\n")


# -- commands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    scenario_config = _scenario_config(config)
    encoder = _encoder(config)
    scenario = generate_scenario(scenario_config, encoder)
    write_dataset(scenario, args.out)
    n_train = sum(len(im.proposals) for im in scenario.train_images)
    n_eval = sum(len(im.proposals) for im in scenario.eval_images)
    print(f"wrote {args.out}")
    print(f"categories: {len(scenario.base_ids)} base, {len(scenario.novel_ids)} novel, "
          f"{len(scenario.distractor_ids)} distractor")
    print(f"proposals: {n_train} train, {n_eval} eval")
    print(f"config hash: {scenario.dataset_hash()}")
    return 0


def cmd_estimate_k(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    tcfg = _train_config(config)
    scenario = load_dataset(args.dataset)
    feats = []
    for image in scenario.train_images:
        bg = [p for p in image.proposals if p.gt_label is None]
        kept = filter_background_proposals(
            bg, image.gt_boxes, theta=tcfg.score_threshold,
            gt_iou_cut=tcfg.gt_iou_cut, nms_iou=tcfg.nms_iou,
        )
        feats.extend(p.img_feature for p in kept)
    if not feats:
        print("no background proposals survive filtering", file=sys.stderr)
        return 1
    features = np.stack(feats)
    k_max = min(tcfg.k_max, features.shape[0])
    estimate = estimate_category_count(features, tcfg.k_min, k_max, tcfg.seed)
    print(f"{'k':>4} {'silhouette':>12}")
    for k, score in estimate.scores:
        marker = "  <-- selected" if k == estimate.count else ""
        print(f"{k:>4} {score:>12.4f}{marker}")
    print(f"estimated count: {estimate.count}"
          + (" (low confidence)" if estimate.low_confidence else ""))
    print(f"vocabulary will use {estimate.count} + {tcfg.extra_categories} underlying categories")
    if args.out:
        write_text(
            args.out,
            canonical_json(
                {
                    "count": estimate.count,
                    "best_score": estimate.best_score,
                    "low_confidence": estimate.low_confidence,
                    "scores": [[k, s] for k, s in estimate.scores],
                    "n_features": int(features.shape[0]),
                }
            )
            + "\n",
        )
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    tcfg = _train_config(config)
    scenario = load_dataset(args.dataset)
    history, checkpoint = train(tcfg, scenario)
    out_dir = Path(args.out_dir)
    checkpoint.save(out_dir / "checkpoint.json")
    write_text(out_dir / "history.json", history_to_json(history) + "\n")
    _write_manifest(out_dir, {"train_config_hash": config_hash(asdict(tcfg))})
    first, last = history.steps[0], history.steps[-1]
    print(f"trained {tcfg.steps} steps (seed {tcfg.seed})")
    print(f"loss: {first.breakdown.total:.6f} (step 1) -> {last.breakdown.total:.6f} (step {tcfg.steps})")
    print(f"underlying categories: {checkpoint.n_discovered} discovered + {tcfg.extra_categories} expansion")
    print(f"wrote {out_dir / 'checkpoint.json'}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    eval_cfg = config.get("eval", {})
    rectify = args.rectify if args.rectify is not None else eval_cfg.get("rectify", True)
    threshold = eval_cfg.get("recall_threshold", 0.5)
    checkpoint = Checkpoint.load(args.checkpoint)
    scenario = load_dataset(args.dataset)
    report = evaluate(checkpoint, scenario, rectify=rectify, recall_threshold=threshold)
    out_dir = Path(args.out_dir)
    write_text(out_dir / "report.json", report.to_json() + "\n")
    write_text(out_dir / "report.txt", report.render() + "\n")
    _write_manifest(out_dir, {"dataset_hash": scenario.dataset_hash()})
    print(report.render())
    return 0


def cmd_rectify_report(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    checkpoint = Checkpoint.load(args.checkpoint)
    scenario = load_dataset(args.dataset)
    encoder = checkpoint.encoder_obj()
    tau = checkpoint.config_obj().temperature
    from .vocab import build_inference_vocab

    train_vocab = checkpoint.build_vocab()
    novel_emb = (
        np.stack([encoder.encode_named_category(scenario.name_seeds[i]) for i in scenario.novel_ids])
        if scenario.novel_ids
        else np.zeros((0, encoder.dim))
    )
    vocab = build_inference_vocab(train_vocab, scenario.novel_ids, novel_emb)
    queries = [
        p.det_feature
        for image in scenario.eval_images
        for p in image.proposals
    ][: args.max_proposals]
    report = rectification_report(vocab, tau, np.stack(queries))
    out_dir = Path(args.out_dir)
    write_text(out_dir / "rectification.json", canonical_json(report) + "\n")
    lines = [f"{'category':>10} {'factor':>10}"]
    for i, f in enumerate(report["shrinking_factors"]):
        lines.append(f"{i:>10} {f:>10.4f}")
    lines.append(f"mean factor: {report['mean_shrinking_factor']:.4f}")
    text = "\n".join(lines)
    write_text(out_dir / "rectification.txt", text + "\n")
    _write_manifest(out_dir, {"dataset_hash": scenario.dataset_hash()})
    print(text)
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    tcfg = _train_config(config)
    ablation_cfg = config.get("ablation", {})
    seeds = tuple(ablation_cfg.get("seeds", list(range(10))))
    combo_names = ablation_cfg.get("combos")
    combos = STANDARD_COMBOS
    if combo_names:
        by_name = {c.name: c for c in STANDARD_COMBOS}
        unknown = [n for n in combo_names if n not in by_name]
        if unknown:
            raise ValueError(f"unknown ablation combos {unknown}; known: {sorted(by_name)}")
        combos = tuple(by_name[n] for n in combo_names)
    scenario = load_dataset(args.dataset)
    result = run_ablation(AblationSpec(combos=combos, seeds=seeds), scenario, tcfg)
    out_dir = Path(args.out_dir)
    write_text(out_dir / "ablation.json", result.to_json() + "\n")
    write_text(out_dir / "ablation.txt", result.render() + "\n")
    _write_manifest(
        out_dir,
        {"dataset_hash": scenario.dataset_hash(), "train_config_hash": config_hash(asdict(tcfg))},
    )
    print(result.render())
    return 0


def _gradcheck_instance(seed: int, tau: float):
    """One random small training setup for the oracle comparison."""
    from .discovery import Box, Proposal

    rng = np.random.default_rng([9, seed])
    enc = MockTextEncoder(seed=int(rng.integers(1 << 16)), dim=16, ctx_dim=8, hidden_dim=32, prefix_dim=4)

    def unit():
        v = rng.standard_normal(enc.dim)
        return v / np.linalg.norm(v)

    def prop(label=None):
        return Proposal(
            box=Box(0.0, 0.0, 10.0, 10.0),
            rpn_score=0.9,
            det_feature=unit(),
            img_feature=unit(),
            gt_label=label,
        )

    n_base, n_disc, n_extra = 4, 3, 2
    base_emb = np.stack([enc.encode_named_category(s) for s in range(n_base)])
    ctx = init_context_vectors(n_disc + n_extra, seed=seed, ctx_dim=enc.ctx_dim) + rng.normal(
        0, 0.4, (n_disc + n_extra, enc.ctx_dim)
    )
    sub = unit()
    vocab = build_training_vocab(
        list(range(n_base)), base_emb, ctx, sub, enc, n_discovered=n_disc
    )
    batch = ProposalBatch(
        foreground=tuple(prop(label=int(rng.integers(n_base))) for _ in range(6)),
        background=tuple(prop() for _ in range(10)),
    )
    partition = BackgroundPartition(
        positives=tuple(
            (prop(), PseudoLabel(i, int(rng.integers(n_disc)), 0.99)) for i in range(3)
        ),
        negatives=tuple(prop() for _ in range(3)),
    )
    config = TrainConfig(temperature=tau, discovered_categories=n_disc, extra_categories=n_extra)
    return batch, vocab, partition, config


def gradcheck_table(n_instances: int, seed: int, h: float = 1e-5) -> tuple[list[dict], bool]:
    """Compare analytic and central-difference gradients across seeded instances.

    Returns per-(tau, component) rows with the worst relative L2 error over
    unflagged instances, plus an overall pass flag against the tolerances.
    """
    from .trainer import COMPONENTS

    rows = []
    ok = True
    for tau, tol in GRADCHECK_TOLERANCES.items():
        for component in COMPONENTS:
            worst = 0.0
            flagged = 0
            for i in range(n_instances):
                batch, vocab, partition, config = _gradcheck_instance(seed + i, tau)
                analytic = compute_gradients(batch, vocab, partition, config, component=component)
                fd, flips = finite_diff_gradients(
                    batch, vocab, partition, config, h=h, component=component
                )
                if flips:
                    flagged += 1
                    continue
                num = float(np.linalg.norm(analytic.flat() - fd.flat()))
                den = max(float(np.linalg.norm(fd.flat())), 1e-12)
                worst = max(worst, num / den)
            passed = bool(worst <= tol)
            ok = ok and passed
            rows.append(
                {
                    "tau": tau,
                    "component": component,
                    "worst_rel_error": worst,
                    "tolerance": tol,
                    "flagged": flagged,
                    "passed": passed,
                }
            )
    return rows, ok


def cmd_gradcheck(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    gc = config.get("gradcheck", {})
    seed = gc.get("seed", 0)
    n = gc.get("instances", args.instances)
    rows, ok = gradcheck_table(n, seed)
    print(f"{'tau':>6} {'component':<12} {'worst rel err':>14} {'tol':>8} {'flagged':>8} {'status':>8}")
    for r in rows:
        status = "ok" if r["passed"] else "FAIL"
        print(
            f"{r['tau']:>6} {r['component']:<12} {r['worst_rel_error']:>14.3e} "
            f"{r['tolerance']:>8.0e} {r['flagged']:>8} {status:>8}"
        )
    if args.out:
        write_text(args.out, canonical_json({"rows": rows, "passed": ok}) + "\n")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovlab",
        description="Desk-scale open-vocabulary classification head laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument(
            "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
            help="override one configuration value (repeatable)",
        )

    p = sub.add_parser("gen", help="generate a synthetic dataset file")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("estimate-k", help="estimate the latent background category count")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="optional JSON report path")
    p.set_defaults(func=cmd_estimate_k)

    p = sub.add_parser("train", help="train the classification head")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    rect = p.add_mutually_exclusive_group()
    rect.add_argument("--rectify", dest="rectify", action="store_true", default=None)
    rect.add_argument("--no-rectify", dest="rectify", action="store_false")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rectify-report", help="export shrinking factors and probability pairs")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-proposals", type=int, default=50)
    p.set_defaults(func=cmd_rectify_report)

    p = sub.add_parser("ablate", help="train and evaluate the module-toggle grid")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against central differences")
    common(p)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--out", help="optional JSON report path")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
