"""mcr-stitch command line: synth, aggregate, train, eval.

Each subcommand reads one experiment config (JSON) and writes its outputs
under the config's out_dir. Identical config + seed reproduces outputs
byte-identically. Exit codes: 0 success, 1 runtime or validation failure,
2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .aggregation import (
    CENTRICITY_TOKENS,
    Centricity,
    add_gaussian_noise,
    build_training_set,
    generate_nonoverlap_centric,
    generate_overlap_centric,
    load_quadruples,
    save_quadruples,
)
from .config import ConfigError, ExperimentConfig, load_experiment_config
from .evaluation import (
    base_preservation_check,
    retrieval_eval,
    zero_shot_classify,
)
from .projector import CheckpointError, ProjectorParams, init_projector, load_checkpoint
from .store import EmbeddingStoreError, load_embeddings, unit_rows
from .synth import (
    FOUR_MODALITY_SPACES,
    PAIR_SPACES,
    SynthWorldConfig,
    generate_world,
    write_world,
)
from .training import (
    INTER_TERMS,
    TrainingDiverged,
    train_extension,
    write_loss_history,
)

RETRIEVAL_KS = (1, 5)


def _noise_seed(seed: int, centricity: Centricity) -> int:
    return int(np.random.SeedSequence((seed, int(centricity))).generate_state(1)[0])


# ---------------------------------------------------------------- synth

def _relative(path: str | Path, root: Path) -> str:
    return str(Path(path).resolve().relative_to(root.resolve()))


def _extension_config(inventory: dict, root: Path, leaf: str, overlap: str,
                      leaf_unique: str, base_unique: str, seed: int) -> dict:
    sets = inventory["sets"]

    def rel(key: str, split: str) -> str:
        return _relative(sets[key][split], root)

    return {
        "base_space": "base",
        "leaf_space": leaf,
        "overlap_modality": overlap,
        "leaf_nonoverlap_modality": leaf_unique,
        "base_nonoverlap_modality": base_unique,
        "batch_size": 256,
        "epochs": 30,
        "seed": seed,
        "embeddings": {
            "base": {
                overlap: rel(f"base.{overlap}", "train"),
                base_unique: rel(f"base.{base_unique}", "train"),
            },
            leaf: {
                overlap: rel(f"{leaf}.{overlap}", "train"),
                leaf_unique: rel(f"{leaf}.{leaf_unique}", "train"),
            },
        },
        "eval_pairs": [
            {
                "query": rel(f"{leaf}.{leaf_unique}", "holdout"),
                "gallery": rel(f"base.{base_unique}", "holdout"),
                "ground_truth": "identity",
                "label": f"{leaf}.{leaf_unique}->base.{base_unique} (holdout)",
            },
            {
                "query": rel(f"base.{overlap}", "holdout"),
                "gallery": rel(f"base.{base_unique}", "holdout"),
                "ground_truth": "identity",
                "label": "base-pair (holdout)",
            },
        ],
        "out_dir": f"runs/{leaf}",
    }


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    spaces = FOUR_MODALITY_SPACES if args.preset == "four-modality" else PAIR_SPACES
    cfg = SynthWorldConfig(
        latent_dim=args.latent_dim,
        embed_dim=args.embed_dim,
        n_items=args.n_items,
        n_holdout=args.n_holdout,
        modality_gap_magnitude=args.gap,
        observation_noise_sigma=args.noise_sigma,
        spaces=spaces,
        seed=args.seed,
    )
    world = generate_world(cfg)
    inventory = write_world(world, out / "world")
    for key, entry in sorted(inventory["sets"].items()):
        for split, path in sorted(entry.items()):
            rows = cfg.n_items if split == "train" else cfg.n_holdout
            print(f"wrote {path} ({rows}x{cfg.embed_dim}, {split})")
    print(f"wrote {inventory['ground_truth']}")

    configs = {"extend-leaf1.json": _extension_config(
        inventory, out, "leaf1", "alpha", "gamma", "beta", args.seed)}
    if args.preset == "four-modality":
        configs["extend-leaf2.json"] = _extension_config(
            inventory, out, "leaf2", "beta", "delta", "alpha", args.seed)
        configs["eval-emergent.json"] = {
            "base_space": "base",
            "leaf_space": "leaf1",
            "seed": args.seed,
            "eval_pairs": [
                {
                    "query": _relative(inventory["sets"]["leaf1.gamma"]["holdout"], out),
                    "gallery": _relative(inventory["sets"]["leaf2.delta"]["holdout"], out),
                    "ground_truth": "identity",
                    "label": "emergent leaf1.gamma~leaf2.delta (holdout)",
                },
                {
                    "query": _relative(inventory["sets"]["base.alpha"]["holdout"], out),
                    "gallery": _relative(inventory["sets"]["base.beta"]["holdout"], out),
                    "ground_truth": "identity",
                    "label": "base-pair (holdout)",
                },
            ],
            "checkpoints": {
                "leaf1": "runs/leaf1/projector.exp1",
                "leaf2": "runs/leaf2/projector.exp1",
            },
            "out_dir": "runs/emergent",
        }
    for name, payload in configs.items():
        path = out / name
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        print(f"wrote {path}")
    return 0


# ------------------------------------------------------------ aggregate

def _load_role_matrices(cfg: ExperimentConfig):
    for role in ("overlap_modality", "leaf_nonoverlap_modality", "base_nonoverlap_modality"):
        if not getattr(cfg, role):
            raise ConfigError(f"aggregate needs config key {role}")
    overlap_leaf, _ = load_embeddings(cfg.embedding_path(cfg.leaf_space, cfg.overlap_modality))
    overlap_base, _ = load_embeddings(cfg.embedding_path(cfg.base_space, cfg.overlap_modality))
    leaf_gallery, _ = load_embeddings(
        cfg.embedding_path(cfg.leaf_space, cfg.leaf_nonoverlap_modality))
    base_gallery, _ = load_embeddings(
        cfg.embedding_path(cfg.base_space, cfg.base_nonoverlap_modality))
    return overlap_leaf, overlap_base, leaf_gallery, base_gallery


def build_pseudo_pairs(cfg: ExperimentConfig, centricities: tuple[str, ...]):
    """Generate the selected centricity lists, noise them, pool and shuffle."""
    overlap_leaf, overlap_base, leaf_gallery, base_gallery = _load_role_matrices(cfg)
    acfg = cfg.aggregation_config()
    lists = {}
    if "overlap" in centricities:
        lists["overlap"] = generate_overlap_centric(
            overlap_leaf, overlap_base, leaf_gallery, base_gallery, acfg)
    if "leaf" in centricities:
        lists["leaf"] = generate_nonoverlap_centric(
            leaf_gallery, overlap_leaf, overlap_base, base_gallery, acfg,
            centricity=Centricity.LEAF_NONOVERLAP)
    if "base" in centricities:
        lists["base"] = generate_nonoverlap_centric(
            base_gallery, overlap_base, overlap_leaf, leaf_gallery, acfg,
            centricity=Centricity.BASE_NONOVERLAP)
    noised = [
        add_gaussian_noise(
            quads, acfg.noise_variance, _noise_seed(acfg.seed, CENTRICITY_TOKENS[token]),
            renormalize=acfg.renormalize_after_noise,
        )
        for token, quads in lists.items()
    ]
    combined = build_training_set(noised, acfg)
    counts = {token: len(quads) for token, quads in lists.items()}
    return combined, counts


def cmd_aggregate(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config)
    centricities = tuple(args.centric.split(",")) if args.centric else cfg.centricities
    bad = [t for t in centricities if t not in CENTRICITY_TOKENS]
    if bad:
        raise ConfigError(f"unknown --centric tokens {bad}; valid: {sorted(CENTRICITY_TOKENS)}")
    combined, counts = build_pseudo_pairs(cfg, centricities)
    out_path = Path(args.out) if args.out else cfg.resolve(cfg.out_dir) / "pseudo_pairs.pqd1"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_quadruples(combined, out_path)
    for token in ("overlap", "leaf", "base"):
        if token in counts:
            print(f"{token}-centric quadruples: {counts[token]}")
    print(f"total (shuffled): {len(combined)} -> {out_path}")
    return 0


# ---------------------------------------------------------------- train

def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config)
    out_dir = cfg.resolve(args.out_dir) if args.out_dir else cfg.resolve(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # the cache is an input produced by `aggregate`; it lives under the
    # config's out_dir even when this run writes elsewhere
    cache = Path(args.cache) if args.cache else cfg.resolve(cfg.out_dir) / "pseudo_pairs.pqd1"
    quadruples = load_quadruples(cache)

    loss_mask = tuple(args.loss_mask.split(",")) if args.loss_mask else None
    if loss_mask:
        bad = [t for t in loss_mask if t not in INTER_TERMS]
        if bad:
            raise ConfigError(f"unknown --loss-mask tokens {bad}; valid: {list(INTER_TERMS)}")
    tcfg = cfg.train_config(loss_mask=loss_mask, seed=args.seed)
    pcfg = cfg.projector_config(quadruples.dim, fl_depth=args.fl_depth, fm_stages=args.fm_stages)
    pp = init_projector(pcfg, seed=tcfg.seed)

    gap_layers = 1 if pcfg.gap_depth == 0 else 2 * pcfg.gap_depth
    print(f"training projector for {cfg.leaf_space}->{cfg.base_space}: "
          f"dim {pcfg.dim_in}, gap layers {gap_layers}, map linear layers {2 * pcfg.map_stages}")
    print(f"{len(quadruples)} quadruples, batch {tcfg.batch_size}, {tcfg.epochs} epochs, "
          f"loss mask {sorted(tcfg.loss_mask)}")

    epoch_totals: dict[int, list[float]] = {}

    def progress(epoch: int, report) -> None:
        epoch_totals.setdefault(epoch, []).append(report.total)

    pp, history = train_extension(
        quadruples, pp, tcfg,
        checkpoint_dir=out_dir, checkpoint_every=args.checkpoint_every,
        progress=progress,
    )
    for epoch in sorted(epoch_totals):
        if epoch % max(1, tcfg.epochs // 10) == 0 or epoch == tcfg.epochs - 1:
            print(f"epoch {epoch:4d}: mean total loss {np.mean(epoch_totals[epoch]):.6f}")

    log_path = out_dir / "loss_history.csv"
    write_loss_history(history, log_path)
    print(f"checkpoint: {out_dir / 'projector.exp1'}")
    print(f"loss log:   {log_path}")
    if not args.no_figures:
        from .plots import save_loss_curves

        fig_path = out_dir / "loss_curves.png"
        save_loss_curves(history, fig_path)
        print(f"figure:     {fig_path}")
    return 0


# ----------------------------------------------------------------- eval

def _parse_checkpoint_args(cfg: ExperimentConfig, entries: list[str]) -> dict[str, Path]:
    mapping = {space: cfg.resolve(p) for space, p in cfg.checkpoints.items()}
    for entry in entries or []:
        if "=" in entry:
            space, _, path = entry.partition("=")
            mapping[space] = Path(path)
        else:
            mapping[cfg.leaf_space] = Path(entry)
    if cfg.leaf_space not in mapping:
        default = cfg.resolve(cfg.out_dir) / "projector.exp1"
        if default.is_file():
            mapping[cfg.leaf_space] = default
    return mapping


def _load_projectors(mapping: dict[str, Path]) -> dict[str, ProjectorParams]:
    return {space: load_checkpoint(path) for space, path in mapping.items()}


def _maybe_project(cfg, projectors, matrix, manifest):
    """Leaf-space sets go through their space's projector; base sets pass through."""
    rows = matrix.data.astype(np.float64)
    if manifest.space_id == cfg.base_space:
        return rows
    if manifest.space_id not in projectors:
        raise ConfigError(
            f"set from space {manifest.space_id!r} needs a checkpoint "
            f"(have: {sorted(projectors) or 'none'})"
        )
    pp = projectors[manifest.space_id]
    if pp.config.dim_in != matrix.dim:
        raise CheckpointError(
            f"checkpoint/descriptor mismatch for space {manifest.space_id!r}: "
            f"checkpoint expects dim {pp.config.dim_in}, embeddings have dim {matrix.dim}"
        )
    from .evaluation import project_to_base

    return project_to_base(pp, rows)


def _ground_truth_indices(cfg, pair, n_queries: int, n_gallery: int) -> np.ndarray:
    if pair.ground_truth == "identity":
        if n_queries != n_gallery:
            raise ConfigError(
                f"identity ground truth needs equal row counts, got {n_queries} vs {n_gallery}"
            )
        return np.arange(n_queries)
    gt = np.asarray(json.loads(cfg.resolve(pair.ground_truth).read_text()), dtype=np.int64)
    return gt


def _invert_permutation(gt: np.ndarray, n_gallery: int) -> np.ndarray | None:
    if gt.shape[0] != n_gallery or sorted(gt.tolist()) != list(range(n_gallery)):
        return None
    inverse = np.empty(n_gallery, dtype=np.int64)
    inverse[gt] = np.arange(n_gallery)
    return inverse


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config)
    out_dir = cfg.resolve(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    projectors = _load_projectors(_parse_checkpoint_args(cfg, args.checkpoint))

    rows: list[tuple[str, float, str, str]] = []
    preservation_failed = False

    for pair in cfg.eval_pairs:
        q_matrix, q_manifest = load_embeddings(cfg.resolve_set_ref(pair.query))
        g_matrix, g_manifest = load_embeddings(cfg.resolve_set_ref(pair.gallery))
        q = unit_rows(_maybe_project(cfg, projectors, q_matrix, q_manifest))
        g = unit_rows(_maybe_project(cfg, projectors, g_matrix, g_manifest))
        gt = _ground_truth_indices(cfg, pair, q.shape[0], g.shape[0])
        tag = pair.tag()

        forward = retrieval_eval(q, g, gt, RETRIEVAL_KS, direction="query->gallery")
        for metric, value in forward.metrics().items():
            rows.append((metric, value, tag, "query->gallery"))
        inverse = _invert_permutation(gt, g.shape[0])
        if inverse is not None:
            backward_rep = retrieval_eval(g, q, inverse, RETRIEVAL_KS, direction="gallery->query")
            for metric, value in backward_rep.metrics().items():
                rows.append((metric, value, tag, "gallery->query"))
            for metric in forward.metrics():
                mean = (forward.metrics()[metric] + backward_rep.metrics()[metric]) / 2.0
                rows.append((metric, mean, tag, "mean"))

        both_base = q_manifest.space_id == cfg.base_space and g_manifest.space_id == cfg.base_space
        if both_base:
            # Base pairs bypass projectors entirely: re-evaluating with no
            # checkpoints loaded must reproduce the same report bit for bit.
            bare_q = unit_rows(q_matrix.data.astype(np.float64))
            bare_g = unit_rows(g_matrix.data.astype(np.float64))
            bare = retrieval_eval(bare_q, bare_g, gt, RETRIEVAL_KS, direction="query->gallery")
            result = base_preservation_check(forward, bare)
            status = "ok" if result.identical else "FAILED: " + "; ".join(result.mismatches)
            print(f"base-preservation [{tag}]: {status}")
            if not result.identical:
                preservation_failed = True

    for ce in cfg.classification_evals:
        samples_matrix, samples_manifest = load_embeddings(cfg.resolve_set_ref(ce.samples))
        samples = unit_rows(_maybe_project(cfg, projectors, samples_matrix, samples_manifest))
        stacked, _ = load_embeddings(cfg.resolve(ce.class_templates))
        offsets = json.loads(cfg.resolve(ce.class_offsets).read_text())
        labels = json.loads(cfg.resolve(ce.labels).read_text())
        templates = [stacked.data[int(a):int(b)].astype(np.float64) for a, b in offsets]
        report = zero_shot_classify(samples, templates, labels)
        for metric, value in report.metrics().items():
            rows.append((metric, value, ce.tag(), "classification"))

    results_path = Path(args.results) if args.results else out_dir / "results.csv"
    lines = [f"{metric},{value:.4f},{dataset},{direction}" for metric, value, dataset, direction in rows]
    results_path.write_text("\n".join(lines) + "\n" if lines else "")
    for line in lines:
        print(line)
    print(f"results: {results_path}")
    if not args.no_figures and rows:
        from .plots import save_metric_bars

        fig_path = results_path.with_suffix(".png")
        save_metric_bars(rows, fig_path)
        print(f"figure:  {fig_path}")
    return 1 if preservation_failed else 0


# ----------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcr-stitch",
        description="Align a leaf contrastive embedding space onto a frozen base space "
                    "from unpaired unimodal embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-space embedding world")
    p.add_argument("--preset", choices=("pair", "four-modality"), default="four-modality")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-items", type=int, default=2000)
    p.add_argument("--n-holdout", type=int, default=500)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--gap", type=float, default=0.5)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("aggregate", help="generate and cache pseudo quadruples")
    p.add_argument("--config", required=True)
    p.add_argument("--centric", help="comma list of overlap,leaf,base (default: config)")
    p.add_argument("--out", help="cache path (default: <out_dir>/pseudo_pairs.pqd1)")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("train", help="train the projector on cached pseudo pairs")
    p.add_argument("--config", required=True)
    p.add_argument("--cache", help="PQD1 cache (default: <out_dir>/pseudo_pairs.pqd1)")
    p.add_argument("--out-dir", help="override config out_dir")
    p.add_argument("--loss-mask", help="comma list of avc,atc,tvc,ttc")
    p.add_argument("--fl-depth", type=int, help="gap map MLP stages (0 = linear)")
    p.add_argument("--fm-stages", type=int, help="space map MLP stages")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--checkpoint-every", type=int, default=0, help="epoch interval checkpoints")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run retrieval/classification evaluations")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", action="append", default=[],
                   help="[SPACE=]PATH; bare path applies to the config's leaf_space")
    p.add_argument("--results", help="results file (default: <out_dir>/results.csv)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, EmbeddingStoreError, CheckpointError, TrainingDiverged,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
