"""Synthetic embedding worlds with exact cross-modal ground truth.

Every item is a latent unit vector shared by all of its observations. A
space embeds latents through its own random orthogonal frame; a modality
inside a space adds a fixed offset drawn orthogonal to the embedded latent
subspace (and to the sibling modality's offset), then optional isotropic
noise, then unit normalization. The offset models the within-space
modality gap: it shifts every item of a modality rigidly, so matched items
across two modalities of one space keep a constant cosine. Frames differ
across spaces, so raw cross-space similarity carries no signal; recovering
it is exactly the stitching task.

Worlds serialize as ordinary EMB1 sets plus a GT1 latent file, and carry a
train/holdout split so evaluation items never feed aggregation.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import RetrievalReport, retrieval_eval
from .store import EmbeddingMatrix, SpaceManifest, save_embeddings, unit_rows

GROUND_TRUTH_MAGIC = b"GT1\x00"

DEFAULT_BASE_SPACE = "base"
WORLD_INVENTORY = "world.json"


@dataclass(frozen=True)
class SpaceSpec:
    space_id: str
    modalities: tuple[str, str]


PAIR_SPACES = (
    SpaceSpec("base", ("alpha", "beta")),
    SpaceSpec("leaf1", ("alpha", "gamma")),
)

FOUR_MODALITY_SPACES = (
    SpaceSpec("base", ("alpha", "beta")),
    SpaceSpec("leaf1", ("alpha", "gamma")),
    SpaceSpec("leaf2", ("beta", "delta")),
)


@dataclass(frozen=True)
class SynthWorldConfig:
    latent_dim: int = 16
    embed_dim: int = 32
    n_items: int = 2000
    n_holdout: int = 500
    modality_gap_magnitude: float = 0.5
    observation_noise_sigma: float = 0.02
    spaces: tuple[SpaceSpec, ...] = PAIR_SPACES
    seed: int = 0

    def __post_init__(self) -> None:
        if self.latent_dim < 1 or self.n_items < 1:
            raise ValueError("latent_dim and n_items must be >= 1")
        if self.embed_dim < self.latent_dim:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be >= latent_dim {self.latent_dim}"
            )
        if self.n_holdout < 0:
            raise ValueError("n_holdout must be >= 0")
        if self.modality_gap_magnitude < 0 or self.observation_noise_sigma < 0:
            raise ValueError("gap magnitude and noise sigma must be >= 0")
        if self.modality_gap_magnitude > 0 and self.embed_dim - self.latent_dim < 2:
            raise ValueError(
                "modality offsets need embed_dim >= latent_dim + 2 to fit in the "
                "orthogonal complement of the latent subspace"
            )
        if not self.spaces:
            raise ValueError("at least one space required")
        seen = set()
        for spec in self.spaces:
            if spec.space_id in seen:
                raise ValueError(f"duplicate space id {spec.space_id!r}")
            seen.add(spec.space_id)

    @property
    def total_items(self) -> int:
        return self.n_items + self.n_holdout


@dataclass(frozen=True)
class GroundTruth:
    """Shared item latents; row index is the item identity everywhere."""

    latents: np.ndarray  # total_items x latent_dim, unit rows

    @property
    def n_items(self) -> int:
        return int(self.latents.shape[0])


@dataclass
class SynthWorld:
    config: SynthWorldConfig
    ground_truth: GroundTruth
    sets: dict[tuple[str, str], EmbeddingMatrix] = field(default_factory=dict)
    frames: dict[str, np.ndarray] = field(default_factory=dict)

    def keys(self) -> list[tuple[str, str]]:
        return list(self.sets)

    def matrix(self, space_id: str, modality: str) -> EmbeddingMatrix:
        try:
            return self.sets[(space_id, modality)]
        except KeyError:
            raise KeyError(f"unknown (space, modality): ({space_id!r}, {modality!r})") from None

    def train_rows(self, space_id: str, modality: str) -> np.ndarray:
        return self.matrix(space_id, modality).data[: self.config.n_items].astype(np.float64)

    def holdout_rows(self, space_id: str, modality: str) -> np.ndarray:
        return self.matrix(space_id, modality).data[self.config.n_items :].astype(np.float64)

    def train_matrix(self, space_id: str, modality: str) -> EmbeddingMatrix:
        return EmbeddingMatrix(self.train_rows(space_id, modality), normalized=True)

    def holdout_matrix(self, space_id: str, modality: str) -> EmbeddingMatrix:
        return EmbeddingMatrix(self.holdout_rows(space_id, modality), normalized=True)


def _orthogonal_frame(rng: np.random.Generator, embed_dim: int, latent_dim: int) -> np.ndarray:
    """Random embed_dim x latent_dim frame with orthonormal columns, sign-canonical."""
    a = rng.standard_normal((embed_dim, latent_dim))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def _complement_offsets(
    rng: np.random.Generator, frame: np.ndarray, count: int, magnitude: float
) -> list[np.ndarray]:
    """Mutually orthogonal offset vectors in the complement of the frame's range."""
    embed_dim = frame.shape[0]
    if magnitude == 0.0:
        return [np.zeros(embed_dim) for _ in range(count)]
    offsets: list[np.ndarray] = []
    for _ in range(count):
        for _attempt in range(64):
            v = rng.standard_normal(embed_dim)
            v -= frame @ (frame.T @ v)
            for prev in offsets:
                v -= prev @ v / (prev @ prev) * prev
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                offsets.append(v / norm * magnitude)
                break
        else:
            raise ValueError("could not draw an offset in the orthogonal complement")
    return offsets


def generate_world(cfg: SynthWorldConfig) -> SynthWorld:
    """Sample a world: shared latents, per-space frames, per-modality offsets.

    Randomness fans out through a seed tree (latents, then one branch per
    space, then per modality) so every embedding set is reproducible and
    independent of generation order.
    """
    root = np.random.SeedSequence(cfg.seed)
    latent_seed, *space_seeds = root.spawn(1 + len(cfg.spaces))

    latents = unit_rows(
        np.random.default_rng(latent_seed).standard_normal((cfg.total_items, cfg.latent_dim))
    )
    world = SynthWorld(config=cfg, ground_truth=GroundTruth(latents=latents))

    for spec, space_seed in zip(cfg.spaces, space_seeds):
        frame_seed, offsets_seed, *noise_seeds = space_seed.spawn(2 + len(spec.modalities))
        frame = _orthogonal_frame(
            np.random.default_rng(frame_seed), cfg.embed_dim, cfg.latent_dim
        )
        world.frames[spec.space_id] = frame
        offsets = _complement_offsets(
            np.random.default_rng(offsets_seed),
            frame,
            len(spec.modalities),
            cfg.modality_gap_magnitude,
        )
        projected = latents @ frame.T
        for modality, offset, noise_seed in zip(spec.modalities, offsets, noise_seeds):
            obs = projected + offset
            if cfg.observation_noise_sigma > 0:
                obs = obs + np.random.default_rng(noise_seed).normal(
                    0.0, cfg.observation_noise_sigma, size=obs.shape
                )
            world.sets[(spec.space_id, modality)] = EmbeddingMatrix(
                unit_rows(obs), normalized=True
            )
    return world


def make_fourmodality_scenario(cfg: SynthWorldConfig | None = None, **overrides) -> SynthWorld:
    """Base space plus two leaves, each sharing one overlap modality with the base.

    Emits six embedding sets: base.alpha, base.beta, leaf1.alpha,
    leaf1.gamma, leaf2.beta, leaf2.delta; item i is the same entity in all
    six.
    """
    if cfg is None:
        cfg = SynthWorldConfig(spaces=FOUR_MODALITY_SPACES, **overrides)
    else:
        cfg = SynthWorldConfig(
            **{
                **{f: getattr(cfg, f) for f in (
                    "latent_dim", "embed_dim", "n_items", "n_holdout",
                    "modality_gap_magnitude", "observation_noise_sigma", "seed",
                )},
                "spaces": FOUR_MODALITY_SPACES,
                **overrides,
            }
        )
    return generate_world(cfg)


def oracle_retrieval(
    world: SynthWorld,
    query_key: tuple[str, str],
    gallery_key: tuple[str, str],
    ks=(1, 5),
    split: str = "train",
) -> RetrievalReport:
    """Retrieval after undoing each space's encoding with the generator's frame.

    Applying a frame's transpose to an embedding recovers the item latent
    (modality offsets live in the frame's orthogonal complement and vanish;
    only observation noise survives). Scoring the recovered latents under
    identity ground truth is therefore the achievable upper reference for
    any trained projector: exact at zero noise, within or across spaces,
    and degrading toward chance as noise grows.
    """
    pick = {
        "train": world.train_rows,
        "holdout": world.holdout_rows,
        "all": lambda s, m: world.matrix(s, m).data.astype(np.float64),
    }
    if split not in pick:
        raise ValueError(f"unknown split {split!r}")
    world.matrix(*query_key)
    world.matrix(*gallery_key)
    q = unit_rows(pick[split](*query_key) @ world.frames[query_key[0]])
    g = unit_rows(pick[split](*gallery_key) @ world.frames[gallery_key[0]])
    gt = np.arange(q.shape[0])
    return retrieval_eval(q, g, gt, ks, direction=f"{'.'.join(query_key)}->{'.'.join(gallery_key)}")


def save_ground_truth(gt: GroundTruth, path: str | Path) -> None:
    """GT1 file: magic, item count, latent dim, float32 latent payload."""
    header = GROUND_TRUTH_MAGIC + struct.pack("<II", gt.n_items, gt.latents.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(gt.latents, dtype="<f4").tobytes())


def load_ground_truth(path: str | Path) -> GroundTruth:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != GROUND_TRUTH_MAGIC:
        raise ValueError(f"not a GT1 file: {path}")
    n, d = struct.unpack_from("<II", buf, 4)
    expected = 12 + n * d * 4
    if len(buf) != expected:
        raise ValueError(f"GT1 payload is {len(buf) - 12} bytes, expected {expected - 12}")
    latents = np.frombuffer(buf, dtype="<f4", count=n * d, offset=12).astype(np.float64)
    return GroundTruth(latents=latents.reshape(n, d))


def write_world(world: SynthWorld, out_dir: str | Path) -> dict:
    """Emit per-(space, modality) train/holdout EMB1 files, GT1, and an inventory.

    Returns the inventory dict (also written as world.json) mapping
    "space.modality" to its train and holdout file paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = world.config
    inventory: dict = {
        "seed": cfg.seed,
        "latent_dim": cfg.latent_dim,
        "embed_dim": cfg.embed_dim,
        "n_items": cfg.n_items,
        "n_holdout": cfg.n_holdout,
        "modality_gap_magnitude": cfg.modality_gap_magnitude,
        "observation_noise_sigma": cfg.observation_noise_sigma,
        "spaces": {spec.space_id: list(spec.modalities) for spec in cfg.spaces},
        "sets": {},
        "ground_truth": str(out / "ground_truth.gt1"),
    }
    note = f"synthetic world seed={cfg.seed}"
    for (space_id, modality), matrix in world.sets.items():
        entry = {}
        for split, rows in (
            ("train", matrix.data[: cfg.n_items]),
            ("holdout", matrix.data[cfg.n_items :]),
        ):
            if rows.shape[0] == 0:
                continue
            split_matrix = EmbeddingMatrix(rows, normalized=True)
            path = out / f"{space_id}.{modality}.{split}.emb1"
            save_embeddings(
                split_matrix,
                SpaceManifest(
                    space_id=space_id,
                    modality=modality,
                    rows=split_matrix.rows,
                    dim=split_matrix.dim,
                    normalized=True,
                    source_note=f"{note} split={split}",
                ),
                path,
            )
            entry[split] = str(path)
        inventory["sets"][f"{space_id}.{modality}"] = entry
    save_ground_truth(world.ground_truth, inventory["ground_truth"])
    (out / WORLD_INVENTORY).write_text(json.dumps(inventory, indent=2, sort_keys=True) + "\n")
    return inventory
