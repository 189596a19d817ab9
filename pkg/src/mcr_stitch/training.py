"""Losses and the optimization loop that extends a leaf space onto the base.

Per step, a batch of pseudo quadruples produces five scalars: a row-wise
L2 penalty pulling the gap-mapped non-overlap vectors onto their overlap
partners inside the leaf space, and four symmetric InfoNCE terms aligning
both projected leaf members against both base members. The total is

    lambda * intra + mean(enabled InfoNCE terms)

and only projector parameters receive gradients; base-space vectors enter
as constants. Optimization is AdamW with decoupled weight decay (linear
weights only) under a per-step cosine learning-rate schedule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .aggregation import QuadrupleSet
from .projector import (
    EVAL,
    TRAIN,
    MlpParams,
    ProjectorParams,
    decays_weight,
    forward_gap,
    forward_mlp,
    named_parameters,
    save_checkpoint,
)
from .store import assert_rows_normalized, unit_rows

INTER_TERMS = ("avc", "atc", "tvc", "ttc")

LOSS_HISTORY_COLUMNS = ("step", "lr", "l_intra", "l_avc", "l_atc", "l_tvc", "l_ttc", "total")


class TrainingDiverged(RuntimeError):
    """Total loss became NaN or infinite; carries the offending step index."""

    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step}: total loss {value}")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4096
    epochs: int = 36
    lr0: float = 1e-3
    lambda_: float = 0.1
    tau2: float = 0.05
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    loss_mask: frozenset[str] = frozenset(INTER_TERMS)
    intra_squared: bool = True  # squared-norm residual; False selects the literal norm
    grad_check: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.tau2 <= 0:
            raise ValueError(f"tau2 must be positive, got {self.tau2}")
        # lr0 == 0 is allowed so a frozen-optimizer run stays expressible.
        if self.lr0 < 0:
            raise ValueError(f"lr0 must be >= 0, got {self.lr0}")
        if self.lambda_ < 0 or self.weight_decay < 0:
            raise ValueError("lambda_ and weight_decay must be >= 0")
        mask = frozenset(self.loss_mask)
        unknown = mask - set(INTER_TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}; valid: {INTER_TERMS}")
        if not mask:
            raise ValueError("loss_mask must enable at least one term")
        object.__setattr__(self, "loss_mask", mask)


@dataclass(frozen=True)
class LossReport:
    step: int
    lr: float
    l_intra: float
    l_avc: float
    l_atc: float
    l_tvc: float
    l_ttc: float
    total: float

    def inter_terms(self) -> dict[str, float]:
        return {name: getattr(self, f"l_{name}") for name in INTER_TERMS}


@dataclass
class OptimizerState:
    """AdamW moment accumulators, one pair per parameter tensor."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    decay: list[bool]
    step: int = 0


def intra_mcr_loss(
    fl_out: Tensor | np.ndarray, target: Tensor | np.ndarray, squared: bool = True
) -> Tensor:
    """Mean half row-residual between gap-mapped vectors and their targets.

    Squared form (default): (1/2)(1/B) sum ||fl_out_i - target_i||^2.
    Literal form: same with the unsquared Euclidean norm.
    """
    a = ad.as_tensor(fl_out)
    b = ad.as_tensor(target)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    if squared:
        return ad.mean_squared_rowdiff(a, b)
    return ad.mean_row_norm(a, b)


def info_nce(x: Tensor | np.ndarray, z: Tensor | np.ndarray, tau2: float) -> Tensor:
    """Symmetric InfoNCE on unit rows; row i of x pairs with row i of z."""
    xt = ad.as_tensor(x)
    zt = ad.as_tensor(z)
    assert_rows_normalized(xt.data, what="info_nce x rows")
    assert_rows_normalized(zt.data, what="info_nce z rows")
    return ad.info_nce(xt, zt, tau2)


@dataclass
class StepLosses:
    """Scalar graph nodes for one training step."""

    intra: Tensor
    inter: dict[str, Tensor]
    total: Tensor

    def values(self) -> dict[str, float]:
        out = {"l_intra": self.intra.item(), "total": self.total.item()}
        for name, node in self.inter.items():
            out[f"l_{name}"] = node.item()
        return out


def total_loss(
    l_intra: float, inter: Mapping[str, float], lambda_: float, loss_mask: Iterable[str]
) -> float:
    """Weighted total: lambda * intra + mean over the enabled InfoNCE terms."""
    enabled = [t for t in INTER_TERMS if t in set(loss_mask)]
    if not enabled:
        raise ValueError("no enabled inter-space terms")
    return lambda_ * l_intra + sum(inter[t] for t in enabled) / len(enabled)


def _combine(intra: Tensor, inter: dict[str, Tensor], lambda_: float, mask: frozenset[str]) -> Tensor:
    enabled = [inter[t] for t in INTER_TERMS if t in mask]
    inter_sum = enabled[0]
    for node in enabled[1:]:
        inter_sum = inter_sum + node
    return intra * lambda_ + inter_sum * (1.0 / len(enabled))


def compute_step_losses(
    batch: QuadrupleSet | Mapping[str, np.ndarray],
    pp: ProjectorParams,
    cfg: TrainConfig,
) -> StepLosses:
    """Forward pass of every loss on one quadruple batch.

    Base-space members are detached constants: no gradient ever reaches
    them. All four InfoNCE terms are evaluated for reporting; masked terms
    simply never connect to the total, so their gradient contribution is
    exactly zero.

    The two projection branches (gap-mapped non-overlap and raw overlap)
    run through the shared space map as one concatenated batch, so both
    are images of the same per-step batch-normalization function; giving
    each branch its own batch statistics was measurably slower to align
    at fixed budget. In eval mode the stacking is a no-op numerically.
    """
    if isinstance(batch, QuadrupleSet):
        leaf_non = batch.leaf_nonoverlap
        leaf_over = batch.leaf_overlap
        base_over = batch.base_overlap
        base_non = batch.base_nonoverlap
    else:
        leaf_non = batch["leaf_nonoverlap"]
        leaf_over = batch["leaf_overlap"]
        base_over = batch["base_overlap"]
        base_non = batch["base_nonoverlap"]

    leaf_non_t = ad.constant(np.asarray(getattr(leaf_non, "data", leaf_non), dtype=np.float64))
    leaf_over_t = ad.constant(np.asarray(getattr(leaf_over, "data", leaf_over), dtype=np.float64))
    base_over_c = unit_rows(np.asarray(getattr(base_over, "data", base_over), dtype=np.float64))
    base_non_c = unit_rows(np.asarray(getattr(base_non, "data", base_non), dtype=np.float64))

    gap_out = forward_gap(pp.gap_map, leaf_non_t, pp.mode)
    intra = intra_mcr_loss(gap_out, leaf_over_t, squared=cfg.intra_squared)

    rows = gap_out.data.shape[0]
    stacked = forward_mlp(pp.space_map, ad.concat_rows(gap_out, leaf_over_t), pp.mode)
    projected = ad.normalize_rows(stacked)
    non_proj = ad.slice_rows(projected, 0, rows)
    over_proj = ad.slice_rows(projected, rows, 2 * rows)

    inter = {
        "avc": ad.info_nce(non_proj, ad.constant(base_non_c), cfg.tau2),
        "atc": ad.info_nce(non_proj, ad.constant(base_over_c), cfg.tau2),
        "tvc": ad.info_nce(over_proj, ad.constant(base_non_c), cfg.tau2),
        "ttc": ad.info_nce(over_proj, ad.constant(base_over_c), cfg.tau2),
    }
    total = _combine(intra, inter, cfg.lambda_, cfg.loss_mask)
    return StepLosses(intra=intra, inter=inter, total=total)


def dense_alignment_loss(
    batch: QuadrupleSet,
    pp: ProjectorParams,
    tau2: float,
    loss_mask: Iterable[str] = INTER_TERMS,
) -> dict[str, Tensor]:
    """The four inter-space InfoNCE terms for one batch (all reported).

    Convenience wrapper over the fused step forward; the mask only affects
    which terms a subsequent total would combine.
    """
    cfg = TrainConfig(
        batch_size=max(2, len(batch)), epochs=1, tau2=tau2, loss_mask=frozenset(loss_mask)
    )
    return compute_step_losses(batch, pp, cfg).inter


def backward(total: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Zero stale gradients, backpropagate from the total, collect gradients."""
    ad.zero_grads(params)
    total.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def init_optimizer(params: Sequence[Tensor], names: Sequence[str]) -> OptimizerState:
    return OptimizerState(
        first_moment=[np.zeros_like(p.data) for p in params],
        second_moment=[np.zeros_like(p.data) for p in params],
        decay=[decays_weight(n) for n in names],
    )


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta), with
    bias-corrected moments; wd is zero for biases and batchnorm parameters.
    """
    state.step += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v, decay in zip(params, grads, state.first_moment, state.second_moment, state.decay):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if decay and cfg.weight_decay > 0.0:
            update = update + cfg.weight_decay * p.data
        p.data -= lr * update


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine decay from lr0 at step 0 to exactly 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside schedule range 0..{total_steps}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _epoch_batches(n: int, batch_size: int, perm: np.ndarray) -> list[np.ndarray]:
    """Batch index slices for one epoch; a trailing batch below 2 rows is dropped."""
    batches = []
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        if idx.size >= 2:
            batches.append(idx)
    return batches


def _spot_check_gradients(
    batch: QuadrupleSet, pp: ProjectorParams, cfg: TrainConfig, tolerance: float = 1e-3
) -> None:
    """Compare a few analytic gradient entries per tensor to central differences."""
    params = named_parameters(pp)
    snapshot = _running_stats_snapshot(pp)
    try:
        losses = compute_step_losses(batch, pp, cfg)
        grads = backward(losses.total, [p for _, p in params])
        rng = np.random.default_rng(0)
        for (name, p), g in zip(params, grads):
            flat_indices = rng.choice(p.data.size, size=min(3, p.data.size), replace=False)
            indices = [np.unravel_index(int(k), p.data.shape) for k in flat_indices]

            def loss_fn() -> float:
                return compute_step_losses(batch, pp, cfg).total.item()

            numeric = ad.numeric_gradient(loss_fn, p, indices=indices)
            for ix in indices:
                a, f = g[ix], numeric[ix]
                if abs(a - f) > 1e-5 + tolerance * max(abs(a), abs(f)):
                    raise RuntimeError(
                        f"gradient check failed for {name}{list(ix)}: analytic {a:.6e} vs "
                        f"finite-difference {f:.6e}"
                    )
    finally:
        _restore_running_stats(pp, snapshot)


def _batchnorm_mlps(pp: ProjectorParams) -> list[MlpParams]:
    maps = [pp.space_map]
    if isinstance(pp.gap_map, MlpParams):
        maps.append(pp.gap_map)
    return maps


def _running_stats_snapshot(pp: ProjectorParams) -> list[np.ndarray]:
    stats = []
    for mlp in _batchnorm_mlps(pp):
        for block in mlp.blocks:
            stats.append(block.norm.running_mean.copy())
            stats.append(block.norm.running_var.copy())
    return stats


def _restore_running_stats(pp: ProjectorParams, stats: list[np.ndarray]) -> None:
    it = iter(stats)
    for mlp in _batchnorm_mlps(pp):
        for block in mlp.blocks:
            block.norm.running_mean[...] = next(it)
            block.norm.running_var[...] = next(it)


def train_extension(
    quadruples: QuadrupleSet,
    pp: ProjectorParams,
    cfg: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    progress: Callable[[int, LossReport], None] | None = None,
) -> tuple[ProjectorParams, list[LossReport]]:
    """Optimize the projector on a fixed pseudo-pair set, base space frozen.

    Runs ``cfg.epochs`` passes over seed-shuffled batches (reshuffled each
    epoch), updating only projector parameters and emitting one LossReport
    per optimizer step. Deterministic for a fixed config and seed. Raises
    TrainingDiverged the moment the total goes non-finite.
    """
    n = len(quadruples)
    if n == 0:
        raise ValueError("empty training set")
    if n < 2:
        raise ValueError("training needs at least 2 quadruples for batch statistics")

    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = len(_epoch_batches(n, cfg.batch_size, np.arange(n)))
    if steps_per_epoch == 0:
        raise ValueError("no batch of size >= 2 can be formed")
    total_steps = cfg.epochs * steps_per_epoch

    named = named_parameters(pp)
    params = [p for _, p in named]
    state = init_optimizer(params, [name for name, _ in named])

    if cfg.grad_check:
        first = quadruples.take(np.arange(min(n, max(2, min(cfg.batch_size, 16)))))
        pp.mode = TRAIN
        _spot_check_gradients(first, pp, cfg)

    history: list[LossReport] = []
    pp.mode = TRAIN
    step = 0
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for idx in _epoch_batches(n, cfg.batch_size, perm):
            lr = cosine_lr(step, total_steps, cfg.lr0)
            losses = compute_step_losses(quadruples.take(idx), pp, cfg)
            values = losses.values()
            if not math.isfinite(values["total"]):
                raise TrainingDiverged(step, values["total"])
            grads = backward(losses.total, params)
            adamw_step(params, grads, state, lr, cfg)
            report = LossReport(step=step, lr=lr, total=values["total"], l_intra=values["l_intra"],
                                l_avc=values["l_avc"], l_atc=values["l_atc"],
                                l_tvc=values["l_tvc"], l_ttc=values["l_ttc"])
            history.append(report)
            if progress is not None:
                progress(epoch, report)
            step += 1
        if (
            checkpoint_dir is not None
            and checkpoint_every > 0
            and (epoch + 1) % checkpoint_every == 0
            and epoch + 1 < cfg.epochs
        ):
            save_checkpoint(pp, checkpoint_dir / f"projector-epoch{epoch + 1:04d}.exp1")
    pp.mode = EVAL
    if checkpoint_dir is not None:
        save_checkpoint(pp, checkpoint_dir / "projector.exp1")
    return pp, history


def write_loss_history(history: Sequence[LossReport], path: str | Path) -> None:
    """Dump the per-step loss log as delimited text, one row per step."""
    lines = [",".join(LOSS_HISTORY_COLUMNS)]
    for r in history:
        lines.append(
            f"{r.step},{r.lr:.10g},{r.l_intra:.10g},{r.l_avc:.10g},"
            f"{r.l_atc:.10g},{r.l_tvc:.10g},{r.l_ttc:.10g},{r.total:.10g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
