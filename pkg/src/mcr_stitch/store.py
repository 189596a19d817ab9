"""On-disk embedding matrices and the EMB1 binary format.

Every embedding set in the pipeline is a dense rows x dim float32 matrix
stored in a small self-describing binary file:

    magic "EMB1" | version u32 LE | rows u32 LE | dim u32 LE | dtype u8 | payload

dtype code 0 is the only defined code (float32 little-endian, row-major).
Each file carries a JSON sidecar at ``<path>.manifest.json`` naming the
producing space and modality. Malformed files are rejected outright; the
loader never repairs.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0
HEADER_SIZE = 17  # 4 magic + 4 version + 4 rows + 4 dim + 1 dtype
MANIFEST_SUFFIX = ".manifest.json"

UNIT_NORM_TOL = 1e-5
MIN_ROW_NORM = 1e-12

_HEADER = struct.Struct("<4sIIIB")


class EmbeddingStoreError(ValueError):
    """A matrix, manifest, or EMB1 byte stream violated the format contract."""


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Immutable rows x dim float32 matrix, optionally unit-normalized.

    Invariants enforced at construction: at least one row and one column,
    all entries finite, and (when ``normalized`` is set) every row within
    1e-5 of unit Euclidean norm.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float32, order="C")
        if arr.ndim != 2:
            raise EmbeddingStoreError(f"expected 2-D matrix, got {arr.ndim}-D")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise EmbeddingStoreError(f"matrix must be at least 1x1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise EmbeddingStoreError("matrix contains NaN or infinity")
        if self.normalized:
            norms = np.linalg.norm(arr.astype(np.float64), axis=1)
            worst = np.abs(norms - 1.0).max()
            if worst > UNIT_NORM_TOL:
                bad = int(np.abs(norms - 1.0).argmax())
                raise EmbeddingStoreError(
                    f"normalized flag set but row {bad} has norm {norms[bad]:.8f}"
                )
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])


@dataclass(frozen=True)
class SpaceManifest:
    """Sidecar metadata pairing an EMB1 file with its (space, modality)."""

    space_id: str
    modality: str
    rows: int
    dim: int
    normalized: bool
    source_note: str = ""

    def matches(self, matrix: EmbeddingMatrix) -> bool:
        return (
            self.rows == matrix.rows
            and self.dim == matrix.dim
            and self.normalized == matrix.normalized
        )


def manifest_path(path: str | Path) -> Path:
    return Path(str(path) + MANIFEST_SUFFIX)


def encode_embeddings(matrix: EmbeddingMatrix) -> bytes:
    """Serialize a matrix to one EMB1 byte stream (header + payload)."""
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, matrix.rows, matrix.dim, DTYPE_FLOAT32)
    payload = np.ascontiguousarray(matrix.data, dtype="<f4").tobytes()
    return header + payload


def decode_embeddings(buf: bytes, offset: int = 0, normalized: bool = False) -> tuple[EmbeddingMatrix, int]:
    """Parse one EMB1 block out of ``buf`` starting at ``offset``.

    Returns the matrix and the number of bytes consumed. Rejects bad magic,
    unknown version or dtype codes, short payloads, and non-finite values.
    """
    if len(buf) - offset < HEADER_SIZE:
        raise EmbeddingStoreError("truncated header: fewer than 17 bytes")
    magic, version, rows, dim, dtype = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise EmbeddingStoreError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise EmbeddingStoreError(f"unsupported format version {version}")
    if dtype != DTYPE_FLOAT32:
        raise EmbeddingStoreError(f"unsupported dtype code {dtype}, expected 0 (float32)")
    if rows < 1 or dim < 1:
        raise EmbeddingStoreError(f"header declares empty matrix {rows}x{dim}")
    expected = rows * dim * 4
    available = len(buf) - offset - HEADER_SIZE
    if available < expected:
        raise EmbeddingStoreError(
            f"payload length mismatch: header declares {rows}x{dim} "
            f"({expected} bytes) but only {available} bytes follow"
        )
    raw = np.frombuffer(buf, dtype="<f4", count=rows * dim, offset=offset + HEADER_SIZE)
    matrix = EmbeddingMatrix(raw.reshape(rows, dim), normalized=normalized)
    return matrix, HEADER_SIZE + expected


def save_embeddings(matrix: EmbeddingMatrix, manifest: SpaceManifest, path: str | Path) -> None:
    """Write ``matrix`` as an EMB1 file plus its JSON manifest sidecar.

    The manifest must agree with the matrix on rows, dim, and the
    normalized flag; loading the written file reproduces the matrix
    bit-exactly.
    """
    if not manifest.matches(matrix):
        raise EmbeddingStoreError(
            "manifest/matrix disagreement: "
            f"manifest says {manifest.rows}x{manifest.dim} normalized={manifest.normalized}, "
            f"matrix is {matrix.rows}x{matrix.dim} normalized={matrix.normalized}"
        )
    if not np.all(np.isfinite(matrix.data)):
        raise EmbeddingStoreError("matrix contains NaN or infinity; refusing to write")
    path = Path(path)
    path.write_bytes(encode_embeddings(matrix))
    manifest_path(path).write_text(
        json.dumps(
            {
                "space_id": manifest.space_id,
                "modality": manifest.modality,
                "rows": manifest.rows,
                "dim": manifest.dim,
                "normalized": manifest.normalized,
                "source_note": manifest.source_note,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )


def load_embeddings(path: str | Path) -> tuple[EmbeddingMatrix, SpaceManifest]:
    """Load an EMB1 file and its manifest, verifying every invariant.

    Raises:
        FileNotFoundError: file or manifest sidecar missing.
        EmbeddingStoreError: bad magic/version/dtype, payload length
            mismatch, NaN/inf payload, trailing bytes, or manifest
            disagreeing with the header.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"embedding file not found: {path}")
    mpath = manifest_path(path)
    if not mpath.is_file():
        raise FileNotFoundError(f"manifest sidecar not found: {mpath}")
    try:
        meta = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise EmbeddingStoreError(f"manifest is not valid JSON: {mpath}") from exc
    missing = {"space_id", "modality", "rows", "dim", "normalized"} - meta.keys()
    if missing:
        raise EmbeddingStoreError(f"manifest missing keys {sorted(missing)}: {mpath}")
    manifest = SpaceManifest(
        space_id=str(meta["space_id"]),
        modality=str(meta["modality"]),
        rows=int(meta["rows"]),
        dim=int(meta["dim"]),
        normalized=bool(meta["normalized"]),
        source_note=str(meta.get("source_note", "")),
    )

    buf = path.read_bytes()
    matrix, consumed = decode_embeddings(buf, normalized=manifest.normalized)
    if consumed != len(buf):
        raise EmbeddingStoreError(
            f"payload length mismatch: {len(buf) - consumed} trailing bytes after "
            f"{matrix.rows}x{matrix.dim} payload"
        )
    if manifest.rows != matrix.rows or manifest.dim != matrix.dim:
        raise EmbeddingStoreError(
            f"manifest/header disagreement: manifest says {manifest.rows}x{manifest.dim}, "
            f"header says {matrix.rows}x{matrix.dim}"
        )
    return matrix, manifest


def l2_normalize(matrix: EmbeddingMatrix) -> EmbeddingMatrix:
    """Return a copy of ``matrix`` with every row scaled to unit norm.

    Rows with norm below 1e-12 cannot be normalized and raise, naming the
    first offending row index.
    """
    arr = matrix.data.astype(np.float64)
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms < MIN_ROW_NORM):
        bad = int(np.argmax(norms < MIN_ROW_NORM))
        raise EmbeddingStoreError(f"zero-norm row {bad}")
    return EmbeddingMatrix(arr / norms[:, None], normalized=True)


def unit_rows(arr: np.ndarray, min_norm: float = MIN_ROW_NORM) -> np.ndarray:
    """Unit-normalize the rows of a raw float array (float64 result)."""
    arr = np.asarray(arr, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    if np.any(norms < min_norm):
        bad = int(np.argmax(norms.ravel() < min_norm))
        raise EmbeddingStoreError(f"zero-norm row {bad}")
    return arr / norms


def cosine_similarity(queries: EmbeddingMatrix, gallery: EmbeddingMatrix) -> np.ndarray:
    """Dense cosine-similarity matrix between two normalized embedding sets.

    Entry (i, j) is the dot product of query row i with gallery row j,
    computed in float64. Requires both inputs normalized and of equal
    dimension.
    """
    if queries.dim != gallery.dim:
        raise EmbeddingStoreError(
            f"dimension mismatch: queries dim {queries.dim} vs gallery dim {gallery.dim}"
        )
    if not queries.normalized or not gallery.normalized:
        raise EmbeddingStoreError("cosine_similarity requires unit-normalized input")
    return queries.data.astype(np.float64) @ gallery.data.astype(np.float64).T


def assert_rows_normalized(arr: np.ndarray, tol: float = 1e-4, what: str = "input") -> None:
    """Guard used by similarity-based losses: rows must be unit within tol."""
    norms = np.linalg.norm(np.asarray(arr, dtype=np.float64), axis=-1)
    worst = float(np.abs(norms - 1.0).max()) if norms.size else 0.0
    if not math.isfinite(worst) or worst > tol:
        raise EmbeddingStoreError(f"unnormalized {what}: max |row norm - 1| = {worst:.3e}")
