"""Zero-shot retrieval and classification metrics over embedding sets.

Every query has exactly one relevant gallery item, so average precision
reduces to the reciprocal rank of that item under descending cosine
similarity (ties broken toward the lower gallery index). Classification
scores samples against unit-normalized means of per-class template
embeddings. A preservation check asserts that base-space metrics are
bit-identical before and after training, since base pairs never touch a
projector.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .projector import ProjectorParams, forward_gap, forward_mlp
from .store import EmbeddingMatrix, unit_rows

DEFAULT_RETRIEVAL_KS = (1, 5)
DEFAULT_CLASSIFICATION_KS = (1, 3, 5)


@dataclass(frozen=True)
class RetrievalReport:
    map: float
    r_at: dict[int, float]
    num_queries: int
    direction: str = "query->gallery"

    def metrics(self) -> dict[str, float]:
        out = {"mAP": self.map}
        for k in sorted(self.r_at):
            out[f"R@{k}"] = self.r_at[k]
        return out


@dataclass(frozen=True)
class ClassificationReport:
    acc_at: dict[int, float]
    num_classes: int
    num_samples: int

    def metrics(self) -> dict[str, float]:
        return {f"Acc@{k}": self.acc_at[k] for k in sorted(self.acc_at)}


@dataclass(frozen=True)
class PreservationResult:
    identical: bool
    mismatches: tuple[str, ...]
    before: RetrievalReport
    after: RetrievalReport


def _as_unit_array(x: EmbeddingMatrix | np.ndarray, what: str) -> np.ndarray:
    if isinstance(x, EmbeddingMatrix):
        if not x.normalized:
            raise ValueError(f"{what} must be normalized")
        return x.data.astype(np.float64)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{what} must be 2-D")
    return arr


def relevant_ranks(
    queries: EmbeddingMatrix | np.ndarray,
    gallery: EmbeddingMatrix | np.ndarray,
    ground_truth: Sequence[int],
) -> np.ndarray:
    """1-based rank of each query's relevant gallery row under cosine ordering.

    Ties are resolved deterministically: an equal-similarity row counts as
    ahead of the relevant one only if its gallery index is lower.
    """
    q = _as_unit_array(queries, "queries")
    g = _as_unit_array(gallery, "gallery")
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch: queries dim {q.shape[1]} vs gallery dim {g.shape[1]}")
    gt = np.asarray(ground_truth, dtype=np.int64)
    if gt.shape != (q.shape[0],):
        raise ValueError(f"need one ground-truth index per query, got shape {gt.shape}")
    if gt.min() < 0 or gt.max() >= g.shape[0]:
        bad = int(np.argmax((gt < 0) | (gt >= g.shape[0])))
        raise ValueError(f"ground-truth index out of range for query {bad}: {gt[bad]}")

    sims = q @ g.T
    relevant = sims[np.arange(q.shape[0]), gt][:, None]
    ahead = (sims > relevant).sum(axis=1)
    idx = np.arange(g.shape[0])[None, :]
    tied_ahead = ((sims == relevant) & (idx < gt[:, None])).sum(axis=1)
    return 1 + ahead + tied_ahead


def retrieval_eval(
    queries: EmbeddingMatrix | np.ndarray,
    gallery: EmbeddingMatrix | np.ndarray,
    ground_truth: Sequence[int],
    ks: Sequence[int] = DEFAULT_RETRIEVAL_KS,
    direction: str = "query->gallery",
) -> RetrievalReport:
    """Single-relevant retrieval metrics: mAP (mean 1/rank) and R@k."""
    ranks = relevant_ranks(queries, gallery, ground_truth)
    return RetrievalReport(
        map=float((1.0 / ranks).mean()),
        r_at={int(k): float((ranks <= k).mean()) for k in ks},
        num_queries=int(ranks.shape[0]),
        direction=direction,
    )


def zero_shot_classify(
    samples: EmbeddingMatrix | np.ndarray,
    class_templates: Sequence[EmbeddingMatrix | np.ndarray],
    labels: Sequence[int],
    ks: Sequence[int] = DEFAULT_CLASSIFICATION_KS,
) -> ClassificationReport:
    """Classify samples against averaged-template class prototypes.

    Each class prototype is the unit-normalized mean of that class's
    template embeddings; Acc@k counts samples whose true class ranks in
    the top k by cosine similarity.
    """
    x = _as_unit_array(samples, "samples")
    prototypes = []
    for ci, templates in enumerate(class_templates):
        t = np.asarray(
            templates.data if isinstance(templates, EmbeddingMatrix) else templates,
            dtype=np.float64,
        )
        if t.ndim == 1:
            t = t[None, :]
        if t.shape[0] < 1:
            raise ValueError(f"class {ci} has no template embeddings")
        if t.shape[1] != x.shape[1]:
            raise ValueError(
                f"dimension mismatch: class {ci} templates dim {t.shape[1]} vs samples dim {x.shape[1]}"
            )
        prototypes.append(unit_rows(t.mean(axis=0)[None, :])[0])
    proto = np.stack(prototypes)

    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (x.shape[0],):
        raise ValueError(f"need one label per sample, got shape {y.shape}")
    if y.min() < 0 or y.max() >= proto.shape[0]:
        raise ValueError("label out of range")

    ranks = relevant_ranks(x, proto, y)
    return ClassificationReport(
        acc_at={int(k): float((ranks <= k).mean()) for k in ks},
        num_classes=int(proto.shape[0]),
        num_samples=int(x.shape[0]),
    )


def base_preservation_check(before: RetrievalReport, after: RetrievalReport) -> PreservationResult:
    """Require bit-identical base-pair metrics across two evaluation runs."""
    mismatches = []
    if before.map != after.map:
        mismatches.append(f"mAP: {before.map!r} != {after.map!r}")
    if sorted(before.r_at) != sorted(after.r_at):
        mismatches.append(f"R@k keys differ: {sorted(before.r_at)} vs {sorted(after.r_at)}")
    else:
        for k in sorted(before.r_at):
            if before.r_at[k] != after.r_at[k]:
                mismatches.append(f"R@{k}: {before.r_at[k]!r} != {after.r_at[k]!r}")
    if before.num_queries != after.num_queries:
        mismatches.append(f"num_queries: {before.num_queries} != {after.num_queries}")
    return PreservationResult(
        identical=not mismatches, mismatches=tuple(mismatches), before=before, after=after
    )


def project_to_base(pp: ProjectorParams, embeddings: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    """Carry leaf embeddings into the base space (eval mode) and unit-normalize."""
    arr = np.asarray(
        embeddings.data if isinstance(embeddings, EmbeddingMatrix) else embeddings,
        dtype=np.float64,
    )
    if pp.mode != "eval":
        raise ValueError("projection for evaluation requires eval mode")
    mapped = forward_mlp(pp.space_map, forward_gap(pp.gap_map, arr, pp.mode), pp.mode)
    return unit_rows(mapped)


def cross_space_eval(
    leaf_queries: EmbeddingMatrix | np.ndarray,
    pp: ProjectorParams,
    base_gallery: EmbeddingMatrix | np.ndarray,
    ground_truth: Sequence[int],
    ks: Sequence[int] = DEFAULT_RETRIEVAL_KS,
    direction: str = "leaf->base",
) -> RetrievalReport:
    """Project leaf queries through the trained maps, retrieve in the base space."""
    projected = project_to_base(pp, leaf_queries)
    return retrieval_eval(projected, base_gallery, ground_truth, ks, direction=direction)


def simulate_random_ranking(
    num_queries: int,
    gallery_size: int,
    ks: Sequence[int] = DEFAULT_RETRIEVAL_KS,
    trials: int = 1000,
    seed: int = 0,
) -> dict[str, tuple[float, float]]:
    """Distribution of retrieval metrics under uniformly random rankings.

    Returns per-metric (mean, standard deviation) over ``trials`` simulated
    evaluations of ``num_queries`` queries each; the yardstick for "no
    better than chance".
    """
    rng = np.random.default_rng(seed)
    ranks = rng.integers(1, gallery_size + 1, size=(trials, num_queries))
    out: dict[str, tuple[float, float]] = {}
    maps = (1.0 / ranks).mean(axis=1)
    out["mAP"] = (float(maps.mean()), float(maps.std()))
    for k in ks:
        r = (ranks <= int(k)).mean(axis=1)
        out[f"R@{k}"] = (float(r.mean()), float(r.std()))
    return out
