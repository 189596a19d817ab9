"""Decoupled projector: a linear gap map plus a batch-normalized MLP space map.

The projector that carries a leaf embedding space onto the frozen base
space is split in two. ``gap_map`` (a single affine layer by default)
closes the offset between the two modalities inside the leaf space;
``space_map`` (an MLP of Linear -> BatchNorm -> ReLU blocks) carries
vectors across spaces. Non-overlap embeddings traverse both maps; overlap
embeddings traverse only the space map.

Checkpoints use the EXP1 container: a JSON architecture descriptor
followed by raw float32 parameter blocks in declaration order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"EXP1"
CHECKPOINT_VERSION = 1

TRAIN = "train"
EVAL = "eval"

MAX_STAGES = 5


class CheckpointError(ValueError):
    """An EXP1 stream is malformed or disagrees with its descriptor."""


@dataclass(frozen=True)
class ProjectorConfig:
    """Architecture of one projector; fully determines parameter shapes."""

    dim_in: int
    dim_out: int | None = None
    hidden_multiplier: int = 2
    gap_depth: int = 0  # 0: plain affine gap map, n>=1: n-stage MLP (ablation)
    map_stages: int = 2
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self) -> None:
        if self.dim_out is None:
            object.__setattr__(self, "dim_out", self.dim_in)
        if self.dim_in < 1 or self.dim_out < 1:
            raise ValueError(f"dims must be >= 1, got {self.dim_in}->{self.dim_out}")
        if self.hidden_multiplier < 1:
            raise ValueError("hidden_multiplier must be >= 1")
        if not 1 <= self.map_stages <= MAX_STAGES:
            raise ValueError(f"map_stages must be in 1..{MAX_STAGES}, got {self.map_stages}")
        if not 0 <= self.gap_depth <= MAX_STAGES:
            raise ValueError(f"gap_depth must be in 0..{MAX_STAGES}, got {self.gap_depth}")

    def to_descriptor(self) -> dict:
        return {
            "dim_in": self.dim_in,
            "dim_out": self.dim_out,
            "hidden_multiplier": self.hidden_multiplier,
            "gap_depth": self.gap_depth,
            "map_stages": self.map_stages,
            "bn_epsilon": self.bn_epsilon,
            "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_descriptor(cls, desc: dict) -> "ProjectorConfig":
        try:
            return cls(**{k: desc[k] for k in (
                "dim_in", "dim_out", "hidden_multiplier", "gap_depth",
                "map_stages", "bn_epsilon", "bn_momentum",
            )})
        except KeyError as exc:
            raise CheckpointError(f"descriptor missing key {exc}") from exc


@dataclass
class LinearParams:
    weight: Tensor  # out_dim x in_dim
    bias: Tensor  # out_dim

    @property
    def dim_in(self) -> int:
        return self.weight.data.shape[1]

    @property
    def dim_out(self) -> int:
        return self.weight.data.shape[0]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5


@dataclass
class MlpBlock:
    linear: LinearParams
    norm: BatchNormParams


@dataclass
class MlpParams:
    blocks: list[MlpBlock]

    @property
    def dim_in(self) -> int:
        return self.blocks[0].linear.dim_in

    @property
    def dim_out(self) -> int:
        return self.blocks[-1].linear.dim_out

    def linear_dims(self) -> list[tuple[int, int]]:
        return [(b.linear.dim_in, b.linear.dim_out) for b in self.blocks]


GapMap = LinearParams | MlpParams


@dataclass
class ProjectorParams:
    gap_map: GapMap
    space_map: MlpParams
    config: ProjectorConfig
    mode: str = EVAL


def _stage_dims(dim_in: int, dim_out: int, stages: int, multiplier: int) -> list[tuple[int, int]]:
    """Linear-layer dims for an s-stage MLP: each stage widens then narrows."""
    dims: list[tuple[int, int]] = []
    current = dim_in
    hidden = multiplier * dim_in
    for stage in range(stages):
        out = dim_out if stage == stages - 1 else dim_in
        dims.append((current, hidden))
        dims.append((hidden, out))
        current = out
    return dims


def _init_linear(rng: np.random.Generator, dim_in: int, dim_out: int) -> LinearParams:
    bound = 1.0 / np.sqrt(dim_in)
    weight = rng.uniform(-bound, bound, size=(dim_out, dim_in))
    return LinearParams(weight=ad.parameter(weight), bias=ad.parameter(np.zeros(dim_out)))


def _init_block(rng: np.random.Generator, dim_in: int, dim_out: int, cfg: ProjectorConfig) -> MlpBlock:
    return MlpBlock(
        linear=_init_linear(rng, dim_in, dim_out),
        norm=BatchNormParams(
            gamma=ad.parameter(np.ones(dim_out)),
            beta=ad.parameter(np.zeros(dim_out)),
            running_mean=np.zeros(dim_out),
            running_var=np.ones(dim_out),
            momentum=cfg.bn_momentum,
            epsilon=cfg.bn_epsilon,
        ),
    )


def _init_mlp(rng: np.random.Generator, dims: list[tuple[int, int]], cfg: ProjectorConfig) -> MlpParams:
    return MlpParams([_init_block(rng, d_in, d_out, cfg) for d_in, d_out in dims])


def init_projector(config: ProjectorConfig, seed: int) -> ProjectorParams:
    """Build a projector with uniform fan-in weight init, deterministic in seed.

    Linear weights are drawn uniformly from [-1/sqrt(fan_in), +1/sqrt(fan_in)];
    biases start at zero, batchnorm at the identity configuration. The gap
    map is drawn first, then the space map, block by block.
    """
    rng = np.random.default_rng(seed)
    if config.gap_depth == 0:
        gap: GapMap = _init_linear(rng, config.dim_in, config.dim_in)
    else:
        gap = _init_mlp(
            rng,
            _stage_dims(config.dim_in, config.dim_in, config.gap_depth, config.hidden_multiplier),
            config,
        )
    space = _init_mlp(
        rng,
        _stage_dims(config.dim_in, config.dim_out, config.map_stages, config.hidden_multiplier),
        config,
    )
    return ProjectorParams(gap_map=gap, space_map=space, config=config, mode=EVAL)


def _check_batch(batch_data: np.ndarray, dim_in: int, who: str) -> None:
    if batch_data.ndim != 2:
        raise ValueError(f"{who} expects a 2-D batch, got {batch_data.ndim}-D")
    if batch_data.shape[1] != dim_in:
        raise ValueError(f"{who}: batch dim {batch_data.shape[1]} != expected {dim_in}")


def forward_linear(params: LinearParams, batch: Tensor | np.ndarray) -> Tensor | np.ndarray:
    """Affine map batch @ W^T + b. Returns the same kind (array or tape node) as given."""
    x = ad.as_tensor(batch)
    _check_batch(x.data, params.dim_in, "forward_linear")
    out = ad.affine(x, params.weight, params.bias)
    return out if isinstance(batch, Tensor) else out.data


def forward_mlp(
    params: MlpParams,
    batch: Tensor | np.ndarray,
    mode: str = EVAL,
    bypass_relu: bool = False,
) -> Tensor | np.ndarray:
    """Run Linear -> BatchNorm -> ReLU blocks in order.

    Train mode normalizes with batch statistics (needs >= 2 rows) and
    updates running statistics in place; eval mode uses running statistics
    and leaves them untouched. ``bypass_relu`` is a test hook that skips the
    rectifiers so the affine chain can be checked in isolation.
    """
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"unknown mode {mode!r}")
    x = ad.as_tensor(batch)
    _check_batch(x.data, params.dim_in, "forward_mlp")
    if mode == TRAIN and x.data.shape[0] < 2:
        raise ValueError(f"train-mode forward needs a batch of >= 2, got {x.data.shape[0]}")
    out = x
    for block in params.blocks:
        out = ad.affine(out, block.linear.weight, block.linear.bias)
        bn = block.norm
        if mode == TRAIN:
            out = ad.batchnorm_train(
                out, bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.momentum, bn.epsilon
            )
        else:
            out = ad.batchnorm_eval(
                out, bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.epsilon
            )
        if not bypass_relu:
            out = ad.relu(out)
    return out if isinstance(batch, Tensor) else out.data


def forward_gap(params: GapMap, batch: Tensor | np.ndarray, mode: str = EVAL) -> Tensor | np.ndarray:
    """Apply the gap map: plain affine, or an MLP when configured for ablation."""
    if isinstance(params, LinearParams):
        return forward_linear(params, batch)
    return forward_mlp(params, batch, mode)


def project_nonoverlap(pp: ProjectorParams, batch: Tensor | np.ndarray) -> Tensor | np.ndarray:
    """Map non-overlap-modality embeddings: space map after gap map."""
    return forward_mlp(pp.space_map, forward_gap(pp.gap_map, batch, pp.mode), pp.mode)


def project_overlap(pp: ProjectorParams, batch: Tensor | np.ndarray) -> Tensor | np.ndarray:
    """Map overlap-modality embeddings: space map only."""
    return forward_mlp(pp.space_map, batch, pp.mode)


def named_parameters(pp: ProjectorParams) -> list[tuple[str, Tensor]]:
    """All trainable tensors in declaration order (checkpoint order)."""
    out: list[tuple[str, Tensor]] = []

    def visit_linear(prefix: str, lin: LinearParams) -> None:
        out.append((f"{prefix}.weight", lin.weight))
        out.append((f"{prefix}.bias", lin.bias))

    def visit_mlp(prefix: str, mlp: MlpParams) -> None:
        for i, block in enumerate(mlp.blocks):
            visit_linear(f"{prefix}.{i}", block.linear)
            out.append((f"{prefix}.{i}.gamma", block.norm.gamma))
            out.append((f"{prefix}.{i}.beta", block.norm.beta))

    if isinstance(pp.gap_map, LinearParams):
        visit_linear("gap", pp.gap_map)
    else:
        visit_mlp("gap", pp.gap_map)
    visit_mlp("map", pp.space_map)
    return out


def decays_weight(name: str) -> bool:
    """Weight decay applies to linear weights only, never biases or batchnorm."""
    return name.endswith(".weight")


def _param_blocks(pp: ProjectorParams) -> list[np.ndarray]:
    """Every array in the checkpoint, including running statistics, in order."""
    blocks: list[np.ndarray] = []

    def visit_linear(lin: LinearParams) -> None:
        blocks.append(lin.weight.data)
        blocks.append(lin.bias.data)

    def visit_mlp(mlp: MlpParams) -> None:
        for block in mlp.blocks:
            visit_linear(block.linear)
            blocks.append(block.norm.gamma.data)
            blocks.append(block.norm.beta.data)
            blocks.append(block.norm.running_mean)
            blocks.append(block.norm.running_var)

    if isinstance(pp.gap_map, LinearParams):
        visit_linear(pp.gap_map)
    else:
        visit_mlp(pp.gap_map)
    visit_mlp(pp.space_map)
    return blocks


def save_checkpoint(pp: ProjectorParams, path: str | Path) -> None:
    """Serialize architecture descriptor plus float32 parameter blocks."""
    desc = json.dumps(pp.config.to_descriptor(), sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(desc)), desc]
    for block in _param_blocks(pp):
        parts.append(np.ascontiguousarray(block, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> ProjectorParams:
    """Rebuild a projector from an EXP1 file, in eval mode.

    The descriptor fixes every block shape; a byte count that disagrees
    with the descriptor is rejected.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not an EXP1 checkpoint: {path}")
    version, desc_len = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(buf) < 12 + desc_len:
        raise CheckpointError("truncated descriptor")
    try:
        desc = json.loads(buf[12 : 12 + desc_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable descriptor: {exc}") from exc
    config = ProjectorConfig.from_descriptor(desc)

    pp = init_projector(config, seed=0)
    offset = 12 + desc_len
    for block in _param_blocks(pp):
        nbytes = block.size * 4
        if offset + nbytes > len(buf):
            raise CheckpointError(
                f"checkpoint too short: descriptor implies more parameter bytes than present"
            )
        values = np.frombuffer(buf, dtype="<f4", count=block.size, offset=offset)
        block[...] = values.reshape(block.shape).astype(np.float64)
        offset += nbytes
    if offset != len(buf):
        raise CheckpointError(f"checkpoint has {len(buf) - offset} trailing bytes")
    pp.mode = EVAL
    return pp
