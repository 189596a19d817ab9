"""Pseudo-pair aggregation across two embedding spaces.

Training pairs are never observed; they are synthesized. A query embedding
retrieves a softmax-weighted average of a gallery, and because the two
spaces encode the overlap modality in matched row order, retrieval weights
computed in one space transfer directly to the other. Chaining these two
moves yields, for every query, a quadruple of semantically consistent
vectors: (leaf non-overlap, leaf overlap, base overlap, base non-overlap).

Three query choices ("centricities") cover both spaces: the overlap
modality itself, the leaf's non-overlap modality, and the base's
non-overlap modality. Their quadruples are noised, pooled, and shuffled
into one training set, cacheable on disk as a PQD1 container (four EMB1
blocks plus a centricity byte per quadruple).
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .store import (
    EmbeddingMatrix,
    EmbeddingStoreError,
    decode_embeddings,
    encode_embeddings,
    unit_rows,
)

QUADRUPLE_MAGIC = b"PQD1"
QUADRUPLE_VERSION = 1

SIMPLEX_TOL = 1e-6


class Centricity(enum.IntEnum):
    """Which modality served as the aggregation query."""

    OVERLAP = 0
    LEAF_NONOVERLAP = 1
    BASE_NONOVERLAP = 2


CENTRICITY_TOKENS = {
    "overlap": Centricity.OVERLAP,
    "leaf": Centricity.LEAF_NONOVERLAP,
    "base": Centricity.BASE_NONOVERLAP,
}


@dataclass(frozen=True)
class AggregationConfig:
    tau1: float = 0.01
    noise_variance: float = 0.004
    renormalize_after_aggregation: bool = True
    renormalize_after_noise: bool = True
    seed: int = 0
    top_k: int | None = None  # optional weight truncation; full softmax by default

    def __post_init__(self) -> None:
        if self.tau1 <= 0:
            raise ValueError(f"tau1 must be positive, got {self.tau1}")
        if self.noise_variance < 0:
            raise ValueError(f"noise_variance must be >= 0, got {self.noise_variance}")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")


@dataclass(frozen=True)
class PseudoQuadruple:
    """One semantically consistent four-tuple spanning both spaces."""

    leaf_nonoverlap: np.ndarray
    leaf_overlap: np.ndarray
    base_overlap: np.ndarray
    base_nonoverlap: np.ndarray
    centricity: Centricity


class QuadrupleSet(Sequence[PseudoQuadruple]):
    """Columnar batch of pseudo quadruples (four N x D float64 arrays)."""

    FIELDS = ("leaf_nonoverlap", "leaf_overlap", "base_overlap", "base_nonoverlap")

    def __init__(
        self,
        leaf_nonoverlap: np.ndarray,
        leaf_overlap: np.ndarray,
        base_overlap: np.ndarray,
        base_nonoverlap: np.ndarray,
        centricity: np.ndarray,
    ):
        arrays = [
            np.ascontiguousarray(a, dtype=np.float64)
            for a in (leaf_nonoverlap, leaf_overlap, base_overlap, base_nonoverlap)
        ]
        n, d = arrays[0].shape
        for a in arrays:
            if a.shape != (n, d):
                raise ValueError(f"quadruple columns disagree on shape: {a.shape} vs {(n, d)}")
        self.leaf_nonoverlap, self.leaf_overlap, self.base_overlap, self.base_nonoverlap = arrays
        self.centricity = np.ascontiguousarray(centricity, dtype=np.uint8)
        if self.centricity.shape != (n,):
            raise ValueError("centricity column must have one entry per quadruple")

    @property
    def dim(self) -> int:
        return int(self.leaf_nonoverlap.shape[1])

    def __len__(self) -> int:
        return int(self.leaf_nonoverlap.shape[0])

    def __getitem__(self, index):
        if isinstance(index, slice):
            return self.take(np.arange(len(self))[index])
        return PseudoQuadruple(
            leaf_nonoverlap=self.leaf_nonoverlap[index],
            leaf_overlap=self.leaf_overlap[index],
            base_overlap=self.base_overlap[index],
            base_nonoverlap=self.base_nonoverlap[index],
            centricity=Centricity(int(self.centricity[index])),
        )

    def __iter__(self) -> Iterator[PseudoQuadruple]:
        for i in range(len(self)):
            yield self[i]

    def take(self, indices: np.ndarray) -> "QuadrupleSet":
        return QuadrupleSet(
            self.leaf_nonoverlap[indices],
            self.leaf_overlap[indices],
            self.base_overlap[indices],
            self.base_nonoverlap[indices],
            self.centricity[indices],
        )

    @classmethod
    def concatenate(cls, parts: Sequence["QuadrupleSet"]) -> "QuadrupleSet":
        parts = [p for p in parts if len(p) > 0]
        if not parts:
            raise ValueError("no quadruples to concatenate")
        return cls(
            np.concatenate([p.leaf_nonoverlap for p in parts]),
            np.concatenate([p.leaf_overlap for p in parts]),
            np.concatenate([p.base_overlap for p in parts]),
            np.concatenate([p.base_nonoverlap for p in parts]),
            np.concatenate([p.centricity for p in parts]),
        )

    def counts_by_centricity(self) -> dict[Centricity, int]:
        return {c: int((self.centricity == int(c)).sum()) for c in Centricity}


def _gallery_array(gallery: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    if isinstance(gallery, EmbeddingMatrix):
        return gallery.data.astype(np.float64)
    arr = np.asarray(gallery, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"gallery must be 2-D, got {arr.ndim}-D")
    return arr


def _softmax_weights(sims: np.ndarray, tau1: float, top_k: int | None) -> np.ndarray:
    """Temperature softmax over the last axis with max subtraction.

    With top_k set, all but the k largest similarities per query are
    dropped and the surviving weights renormalized.
    """
    logits = sims / tau1
    if top_k is not None and top_k < logits.shape[-1]:
        cutoff = np.partition(logits, -top_k, axis=-1)[..., -top_k, None]
        logits = np.where(logits >= cutoff, logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def softmax_weighted_aggregate(
    query: np.ndarray,
    gallery: EmbeddingMatrix | np.ndarray,
    tau1: float,
    top_k: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Retrieve a soft convex combination of gallery rows for one query.

    Weights are softmax((query . row_j) / tau1) over gallery rows j; the
    aggregate is the weight-averaged gallery row. Returns (vector, weights).
    """
    if tau1 <= 0:
        raise ValueError(f"tau1 must be positive, got {tau1}")
    g = _gallery_array(gallery)
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError(f"query must be a single vector, got shape {q.shape}")
    if g.shape[0] < 1:
        raise ValueError("empty gallery")
    if q.shape[0] != g.shape[1]:
        raise ValueError(f"dimension mismatch: query dim {q.shape[0]} vs gallery dim {g.shape[1]}")
    weights = _softmax_weights(g @ q, tau1, top_k)
    return weights @ g, weights


def batched_softmax_aggregate(
    queries: np.ndarray,
    gallery: EmbeddingMatrix | np.ndarray,
    tau1: float,
    top_k: int | None = None,
    chunk: int = 1024,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized softmax_weighted_aggregate over a batch of query rows."""
    g = _gallery_array(gallery)
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"queries {q.shape} incompatible with gallery {g.shape}")
    outs = np.empty((q.shape[0], g.shape[1]))
    weights = np.empty((q.shape[0], g.shape[0]))
    for start in range(0, q.shape[0], chunk):
        stop = min(start + chunk, q.shape[0])
        w = _softmax_weights(q[start:stop] @ g.T, tau1, top_k)
        weights[start:stop] = w
        outs[start:stop] = w @ g
    return outs, weights


def transfer_weights_aggregate(
    weights: np.ndarray, paired_gallery: EmbeddingMatrix | np.ndarray
) -> np.ndarray:
    """Apply retrieval weights from one space to the matched gallery of the other.

    Valid only because the two galleries encode identical items in identical
    row order; the weights must form a probability simplex.
    """
    g = _gallery_array(paired_gallery)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[-1] != g.shape[0]:
        raise ValueError(
            f"length mismatch: {w.shape[-1]} weights vs {g.shape[0]} paired gallery rows"
        )
    sums = w.sum(axis=-1)
    if np.any(w < -SIMPLEX_TOL) or np.any(np.abs(sums - 1.0) > SIMPLEX_TOL):
        raise ValueError("weights fail the simplex check (non-negative, sum to 1)")
    return w @ g


def _maybe_renormalize(arr: np.ndarray, flag: bool) -> np.ndarray:
    return unit_rows(arr) if flag else arr


def generate_overlap_centric(
    overlap_leaf: EmbeddingMatrix,
    overlap_base: EmbeddingMatrix,
    nonoverlap_leaf_gallery: EmbeddingMatrix,
    nonoverlap_base_gallery: EmbeddingMatrix,
    cfg: AggregationConfig,
) -> QuadrupleSet:
    """Quadruples queried from the overlap modality (one per matched row).

    Row i of the two overlap matrices encodes the same item in each space;
    both serve directly as the overlap members, and each aggregates its own
    space's non-overlap gallery to fill the remaining two members.
    """
    if overlap_leaf.rows != overlap_base.rows:
        raise ValueError(
            f"overlap matrices must be matched one-to-one: "
            f"{overlap_leaf.rows} vs {overlap_base.rows} rows"
        )
    leaf_over = overlap_leaf.data.astype(np.float64)
    base_over = overlap_base.data.astype(np.float64)
    leaf_non, _ = batched_softmax_aggregate(leaf_over, nonoverlap_leaf_gallery, cfg.tau1, cfg.top_k)
    base_non, _ = batched_softmax_aggregate(base_over, nonoverlap_base_gallery, cfg.tau1, cfg.top_k)
    leaf_non = _maybe_renormalize(leaf_non, cfg.renormalize_after_aggregation)
    base_non = _maybe_renormalize(base_non, cfg.renormalize_after_aggregation)
    n = overlap_leaf.rows
    return QuadrupleSet(
        leaf_non, leaf_over, base_over, base_non,
        np.full(n, int(Centricity.OVERLAP), dtype=np.uint8),
    )


def generate_nonoverlap_centric(
    queries: EmbeddingMatrix,
    overlap_query_space: EmbeddingMatrix,
    overlap_other_space: EmbeddingMatrix,
    nonoverlap_other_gallery: EmbeddingMatrix,
    cfg: AggregationConfig,
    centricity: Centricity = Centricity.LEAF_NONOVERLAP,
) -> QuadrupleSet:
    """Quadruples queried from a non-overlap modality.

    The query is kept verbatim. Its softmax weights against the overlap
    gallery of its own space aggregate that gallery, transfer unchanged to
    the other space's matched overlap gallery, and the transferred
    aggregate (renormalized when configured) queries the other space's
    non-overlap gallery in a second stage.

    ``centricity`` selects the field mapping: LEAF_NONOVERLAP when the
    queries live in the leaf space, BASE_NONOVERLAP for the mirrored call
    with the spaces' roles exchanged.
    """
    if centricity == Centricity.OVERLAP:
        raise ValueError("overlap-centric quadruples come from generate_overlap_centric")
    if overlap_query_space.rows != overlap_other_space.rows:
        raise ValueError(
            f"overlap matrices must be matched one-to-one: "
            f"{overlap_query_space.rows} vs {overlap_other_space.rows} rows"
        )
    q = queries.data.astype(np.float64)
    same_over_raw, weights = batched_softmax_aggregate(
        q, overlap_query_space, cfg.tau1, cfg.top_k
    )
    other_over_raw = weights @ overlap_other_space.data.astype(np.float64)

    same_over = _maybe_renormalize(same_over_raw, cfg.renormalize_after_aggregation)
    other_over = _maybe_renormalize(other_over_raw, cfg.renormalize_after_aggregation)
    other_non_raw, _ = batched_softmax_aggregate(
        other_over, nonoverlap_other_gallery, cfg.tau1, cfg.top_k
    )
    other_non = _maybe_renormalize(other_non_raw, cfg.renormalize_after_aggregation)

    n = queries.rows
    tags = np.full(n, int(centricity), dtype=np.uint8)
    if centricity == Centricity.LEAF_NONOVERLAP:
        return QuadrupleSet(q, same_over, other_over, other_non, tags)
    return QuadrupleSet(other_non, other_over, same_over, q, tags)


def add_gaussian_noise(
    quadruples: QuadrupleSet,
    variance: float,
    seed: int,
    renormalize: bool = True,
) -> QuadrupleSet:
    """Perturb every member of every quadruple with i.i.d. Gaussian noise.

    Noise has standard deviation sqrt(variance) per component; with
    ``renormalize`` the perturbed vectors are scaled back to the unit
    sphere. Variance 0 returns the input unchanged.
    """
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    if variance == 0.0:
        return quadruples
    rng = np.random.default_rng(seed)
    sigma = np.sqrt(variance)
    columns = []
    for name in QuadrupleSet.FIELDS:
        arr = getattr(quadruples, name) + rng.normal(0.0, sigma, size=(len(quadruples), quadruples.dim))
        columns.append(unit_rows(arr) if renormalize else arr)
    return QuadrupleSet(*columns, quadruples.centricity.copy())


def build_training_set(
    quadruple_lists: Sequence[QuadrupleSet], cfg: AggregationConfig
) -> QuadrupleSet:
    """Pool centricity lists and shuffle them with a seed-determined permutation."""
    lists = [q for q in quadruple_lists if len(q) > 0]
    if not lists:
        raise ValueError("all quadruple lists are empty")
    combined = QuadrupleSet.concatenate(lists)
    perm = np.random.default_rng(cfg.seed).permutation(len(combined))
    return combined.take(perm)


def save_quadruples(quadruples: QuadrupleSet, path: str | Path) -> None:
    """Write a PQD1 cache: header, four EMB1 blocks, centricity bytes."""
    n, d = len(quadruples), quadruples.dim
    parts = [QUADRUPLE_MAGIC, struct.pack("<III", QUADRUPLE_VERSION, n, d)]
    for name in QuadrupleSet.FIELDS:
        block = EmbeddingMatrix(getattr(quadruples, name).astype(np.float32))
        parts.append(encode_embeddings(block))
    parts.append(quadruples.centricity.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_quadruples(path: str | Path) -> QuadrupleSet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"quadruple cache not found: {path}")
    buf = path.read_bytes()
    if len(buf) < 16 or buf[:4] != QUADRUPLE_MAGIC:
        raise EmbeddingStoreError(f"not a PQD1 cache: {path}")
    version, n, d = struct.unpack_from("<III", buf, 4)
    if version != QUADRUPLE_VERSION:
        raise EmbeddingStoreError(f"unsupported PQD1 version {version}")
    offset = 16
    columns = []
    for name in QuadrupleSet.FIELDS:
        matrix, consumed = decode_embeddings(buf, offset)
        if matrix.rows != n or matrix.dim != d:
            raise EmbeddingStoreError(
                f"PQD1 block {name} is {matrix.rows}x{matrix.dim}, header says {n}x{d}"
            )
        columns.append(matrix.data.astype(np.float64))
        offset += consumed
    if len(buf) - offset != n:
        raise EmbeddingStoreError(
            f"PQD1 centricity block has {len(buf) - offset} bytes, expected {n}"
        )
    centricity = np.frombuffer(buf, dtype=np.uint8, count=n, offset=offset)
    if centricity.size and centricity.max() > max(int(c) for c in Centricity):
        raise EmbeddingStoreError("PQD1 centricity byte out of range")
    return QuadrupleSet(*columns, centricity.copy())
