"""Experiment configuration files: one JSON document drives a whole run.

The schema mirrors the hyperparameters of the training recipe (every value
defaulting to the full-scale reference setting, so an empty file is the reference
setup), names the two spaces and their modality roles, maps each
(space, modality) to an embedding file, and lists the retrieval pairs to
evaluate. Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .aggregation import CENTRICITY_TOKENS, AggregationConfig
from .projector import ProjectorConfig
from .training import INTER_TERMS, TrainConfig


class ConfigError(ValueError):
    """The experiment config is malformed or references missing files."""


@dataclass(frozen=True)
class EvalPair:
    query: str  # "space.modality" key into the embeddings map, or an EMB1 path
    gallery: str
    ground_truth: str = "identity"  # or a path to a JSON array of indices
    label: str = ""

    def tag(self) -> str:
        return self.label or f"{self.query}~{self.gallery}"


@dataclass(frozen=True)
class ClassificationEval:
    samples: str
    class_templates: str  # stacked EMB1 of all template embeddings
    class_offsets: str  # JSON: list of [start, stop) row ranges, one per class
    labels: str  # JSON: list of class indices, one per sample
    label: str = ""

    def tag(self) -> str:
        return self.label or f"classify:{self.samples}"


@dataclass
class ExperimentConfig:
    # aggregation + training scalars (full-scale reference defaults)
    tau1: float = 0.01
    tau2: float = 0.05
    lambda_: float = 0.1
    noise_variance: float = 0.004
    batch_size: int = 4096
    epochs: int = 36
    lr0: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    centricities: tuple[str, ...] = ("overlap", "leaf", "base")
    loss_mask: tuple[str, ...] = INTER_TERMS
    fl_depth: int = 0
    fm_stages: int = 2

    # space roles
    base_space: str = "base"
    leaf_space: str = "leaf1"
    overlap_modality: str = ""
    leaf_nonoverlap_modality: str = ""
    base_nonoverlap_modality: str = ""

    embeddings: dict = field(default_factory=dict)  # space -> modality -> path
    eval_pairs: tuple[EvalPair, ...] = ()
    classification_evals: tuple[ClassificationEval, ...] = ()
    checkpoints: dict = field(default_factory=dict)  # space -> checkpoint path
    out_dir: str = "runs/experiment"

    base_dir: Path = field(default_factory=Path)

    def resolve(self, path: str | Path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else (self.base_dir / path)

    def embedding_path(self, space: str, modality: str) -> Path:
        try:
            return self.resolve(self.embeddings[space][modality])
        except KeyError:
            raise ConfigError(f"no embeddings entry for {space}.{modality}") from None

    def resolve_set_ref(self, ref: str) -> Path:
        """An eval-pair side: either 'space.modality' or a direct file path."""
        if "." in ref and not ref.endswith(".emb1"):
            space, _, modality = ref.partition(".")
            if space in self.embeddings and modality in self.embeddings[space]:
                return self.embedding_path(space, modality)
        path = self.resolve(ref)
        if path.is_file():
            return path
        raise ConfigError(f"eval set reference {ref!r} is neither an embeddings key nor a file")

    def aggregation_config(self) -> AggregationConfig:
        return AggregationConfig(tau1=self.tau1, noise_variance=self.noise_variance, seed=self.seed)

    def train_config(self, loss_mask: tuple[str, ...] | None = None, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr0=self.lr0,
            lambda_=self.lambda_,
            tau2=self.tau2,
            weight_decay=self.weight_decay,
            seed=self.seed if seed is None else seed,
            loss_mask=frozenset(loss_mask if loss_mask is not None else self.loss_mask),
        )

    def projector_config(self, dim: int, fl_depth: int | None = None, fm_stages: int | None = None) -> ProjectorConfig:
        return ProjectorConfig(
            dim_in=dim,
            gap_depth=self.fl_depth if fl_depth is None else fl_depth,
            map_stages=self.fm_stages if fm_stages is None else fm_stages,
        )


_SCALAR_KEYS = {
    "tau1": float,
    "tau2": float,
    "lambda": float,
    "noise_variance": float,
    "batch_size": int,
    "epochs": int,
    "lr0": float,
    "weight_decay": float,
    "seed": int,
    "fl_depth": int,
    "fm_stages": int,
    "base_space": str,
    "leaf_space": str,
    "overlap_modality": str,
    "leaf_nonoverlap_modality": str,
    "base_nonoverlap_modality": str,
    "out_dir": str,
}

_KNOWN_KEYS = set(_SCALAR_KEYS) | {
    "centricities", "loss_mask", "embeddings", "eval_pairs",
    "classification_evals", "checkpoints",
}


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate an experiment config file.

    Every referenced embedding file must exist at validation time; unknown
    keys, unknown centricity or loss tokens, and malformed eval pairs are
    rejected immediately rather than mid-run.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")

    unknown = set(raw) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    cfg = ExperimentConfig(base_dir=path.parent.resolve())
    for key, cast in _SCALAR_KEYS.items():
        if key in raw:
            attr = "lambda_" if key == "lambda" else key
            setattr(cfg, attr, cast(raw[key]))

    if "centricities" in raw:
        tokens = tuple(str(t) for t in raw["centricities"])
        bad = [t for t in tokens if t not in CENTRICITY_TOKENS]
        if bad:
            raise ConfigError(f"unknown centricities {bad}; valid: {sorted(CENTRICITY_TOKENS)}")
        cfg.centricities = tokens
    if "loss_mask" in raw:
        tokens = tuple(str(t) for t in raw["loss_mask"])
        bad = [t for t in tokens if t not in INTER_TERMS]
        if bad:
            raise ConfigError(f"unknown loss terms {bad}; valid: {list(INTER_TERMS)}")
        cfg.loss_mask = tokens

    if "embeddings" in raw:
        if not isinstance(raw["embeddings"], dict):
            raise ConfigError("embeddings must map space -> modality -> path")
        cfg.embeddings = {
            str(space): {str(m): str(p) for m, p in mods.items()}
            for space, mods in raw["embeddings"].items()
        }
        for space, mods in cfg.embeddings.items():
            for modality, p in mods.items():
                full = cfg.resolve(p)
                if not full.is_file():
                    raise ConfigError(f"embeddings.{space}.{modality}: file not found: {full}")

    if "eval_pairs" in raw:
        pairs = []
        for entry in raw["eval_pairs"]:
            if not isinstance(entry, dict) or "query" not in entry or "gallery" not in entry:
                raise ConfigError(f"eval pair needs query and gallery: {entry}")
            pairs.append(
                EvalPair(
                    query=str(entry["query"]),
                    gallery=str(entry["gallery"]),
                    ground_truth=str(entry.get("ground_truth", "identity")),
                    label=str(entry.get("label", "")),
                )
            )
        cfg.eval_pairs = tuple(pairs)
        for pair in cfg.eval_pairs:
            cfg.resolve_set_ref(pair.query)
            cfg.resolve_set_ref(pair.gallery)
            if pair.ground_truth != "identity" and not cfg.resolve(pair.ground_truth).is_file():
                raise ConfigError(f"ground-truth file not found: {pair.ground_truth}")

    if "classification_evals" in raw:
        evals = []
        for entry in raw["classification_evals"]:
            needed = {"samples", "class_templates", "class_offsets", "labels"}
            if not isinstance(entry, dict) or needed - entry.keys():
                raise ConfigError(f"classification eval needs {sorted(needed)}: {entry}")
            evals.append(
                ClassificationEval(
                    samples=str(entry["samples"]),
                    class_templates=str(entry["class_templates"]),
                    class_offsets=str(entry["class_offsets"]),
                    labels=str(entry["labels"]),
                    label=str(entry.get("label", "")),
                )
            )
        cfg.classification_evals = tuple(evals)
        for ce in cfg.classification_evals:
            cfg.resolve_set_ref(ce.samples)
            for p in (ce.class_templates, ce.class_offsets, ce.labels):
                if not cfg.resolve(p).is_file():
                    raise ConfigError(f"classification eval file not found: {p}")

    if "checkpoints" in raw:
        if not isinstance(raw["checkpoints"], dict):
            raise ConfigError("checkpoints must map space -> path")
        cfg.checkpoints = {str(s): str(p) for s, p in raw["checkpoints"].items()}

    return cfg
