"""Minimal reverse-mode automatic differentiation over numpy arrays.

Define-by-run tape in the micrograd style: every operation returns a
``Tensor`` whose backward closure scatters the incoming gradient to its
parents. Only the handful of operations the projector and its losses need
are implemented, each with a hand-derived local gradient. All math runs in
float64.

Operations whose output depends only on constants skip tape construction
entirely, so eval-mode forwards allocate no backward state.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    """A float64 array plus, when reachable from a parameter, a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data: Array | float,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[Array], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate(self, g: Array) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar root through the recorded tape."""
        if self.data.ndim != 0:
            raise ValueError("backward() requires a scalar root")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Scalar-combination arithmetic, enough to mix loss terms.
    def __add__(self, other: "Tensor | float") -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        return _node(
            self.data + other.data,
            (self, other),
            lambda g: (self.accumulate(_unbroadcast(g, self.data.shape)),
                       other.accumulate(_unbroadcast(g, other.data.shape))),
        )

    __radd__ = __add__

    def __mul__(self, c: float) -> "Tensor":
        c = float(c)
        return _node(self.data * c, (self,), lambda g: self.accumulate(g * c))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return self + (-other if isinstance(other, Tensor) else -float(other))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data: Array | float) -> Tensor:
    return Tensor(data)


def parameter(data: Array | float) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def as_tensor(x: "Tensor | Array | float") -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: Array, parents: tuple[Tensor, ...], backward: Callable[[Array], None]) -> Tensor:
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    # Only scalar broadcasting occurs in this graph.
    return g.sum().reshape(shape)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight^T + bias for a batch of rows; weight is out_dim x in_dim."""
    out = x.data @ weight.data.T + bias.data

    def backward(g: Array) -> None:
        x.accumulate(g @ weight.data)
        weight.accumulate(g.T @ x.data)
        bias.accumulate(g.sum(axis=0))

    return _node(out, (x, weight, bias), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def backward(g: Array) -> None:
        x.accumulate(g * mask)

    return _node(x.data * mask, (x,), backward)


def batchnorm_train(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Array,
    running_var: Array,
    momentum: float,
    epsilon: float,
) -> Tensor:
    """Batch normalization from batch statistics, updating running stats in place.

    The backward path differentiates through the batch mean and (biased)
    batch variance. Running statistics are a side effect outside the tape.
    """
    if x.data.shape[0] < 2:
        raise ValueError(f"batch statistics need at least 2 rows, got {x.data.shape[0]}")
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var

    def backward(g: Array) -> None:
        batch = x.data.shape[0]
        gamma.accumulate((g * xhat).sum(axis=0))
        beta.accumulate(g.sum(axis=0))
        dxhat = g * gamma.data
        x.accumulate(
            inv_std
            / batch
            * (batch * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        )

    return _node(out, (x, gamma, beta), backward)


def batchnorm_eval(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Array,
    running_var: Array,
    epsilon: float,
) -> Tensor:
    """Batch normalization from frozen running statistics (pure per-feature affine)."""
    inv_std = 1.0 / np.sqrt(running_var + epsilon)
    xhat = (x.data - running_mean) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g: Array) -> None:
        x.accumulate(g * gamma.data * inv_std)
        gamma.accumulate((g * xhat).sum(axis=0))
        beta.accumulate(g.sum(axis=0))

    return _node(out, (x, gamma, beta), backward)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack two row batches; gradients route back to their own slices."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ValueError(f"cannot concat shapes {a.data.shape} and {b.data.shape}")
    split = a.data.shape[0]

    def backward(g: Array) -> None:
        a.accumulate(g[:split])
        b.accumulate(g[split:])

    return _node(np.vstack([a.data, b.data]), (a, b), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice; the backward pass scatters into the full batch."""
    if not 0 <= start < stop <= x.data.shape[0]:
        raise ValueError(f"slice [{start}:{stop}) out of range for {x.data.shape[0]} rows")

    def backward(g: Array) -> None:
        full = np.zeros_like(x.data)
        full[start:stop] = g
        x.accumulate(full)

    return _node(x.data[start:stop].copy(), (x,), backward)


def normalize_rows(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm (norms clamped at min_norm)."""
    norms = np.maximum(np.linalg.norm(x.data, axis=1, keepdims=True), min_norm)
    y = x.data / norms

    def backward(g: Array) -> None:
        x.accumulate((g - y * (g * y).sum(axis=1, keepdims=True)) / norms)

    return _node(y, (x,), backward)


def mean_squared_rowdiff(a: Tensor, b: Tensor, halved: bool = True) -> Tensor:
    """(1/2)(1/B) sum_i ||a_i - b_i||^2 (the smooth row-residual penalty)."""
    d = a.data - b.data
    batch = d.shape[0]
    scale = (0.5 if halved else 1.0) / batch
    out = np.asarray(scale * (d * d).sum())

    def backward(g: Array) -> None:
        gd = g * 2.0 * scale * d
        a.accumulate(gd)
        b.accumulate(-gd)

    return _node(out, (a, b), backward)


def mean_row_norm(a: Tensor, b: Tensor, halved: bool = True, min_norm: float = 1e-12) -> Tensor:
    """(1/2)(1/B) sum_i ||a_i - b_i||_2 (literal-norm variant, eps-guarded gradient)."""
    d = a.data - b.data
    batch = d.shape[0]
    norms = np.linalg.norm(d, axis=1)
    scale = (0.5 if halved else 1.0) / batch
    out = np.asarray(scale * norms.sum())
    safe = np.maximum(norms, min_norm)[:, None]

    def backward(g: Array) -> None:
        gd = g * scale * d / safe
        a.accumulate(gd)
        b.accumulate(-gd)

    return _node(out, (a, b), backward)


def info_nce(x: Tensor, z: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over row-matched batches of unit vectors.

    With S the pairwise dot-product matrix, the loss is
    -(1/2B) sum_i [log softmax_row(S/tau)_ii + log softmax_col(S/tau)_ii],
    with log-sum-exp stabilized by max subtraction.
    """
    if x.data.shape != z.data.shape:
        raise ValueError(f"shape mismatch: {x.data.shape} vs {z.data.shape}")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    batch = x.data.shape[0]
    logits = (x.data @ z.data.T) / tau
    diag = np.diagonal(logits)

    row_max = logits.max(axis=1, keepdims=True)
    row_exp = np.exp(logits - row_max)
    row_lse = row_max[:, 0] + np.log(row_exp.sum(axis=1))
    col_max = logits.max(axis=0, keepdims=True)
    col_exp = np.exp(logits - col_max)
    col_lse = col_max[0, :] + np.log(col_exp.sum(axis=0))

    out = np.asarray(((row_lse - diag) + (col_lse - diag)).sum() / (2.0 * batch))

    def backward(g: Array) -> None:
        p_row = row_exp / row_exp.sum(axis=1, keepdims=True)
        p_col = col_exp / col_exp.sum(axis=0, keepdims=True)
        ds = (p_row + p_col - 2.0 * np.eye(batch)) * (g / (2.0 * batch * tau))
        x.accumulate(ds @ z.data)
        z.accumulate(ds.T @ x.data)

    return _node(out, (x, z), backward)


def numeric_gradient(
    loss_fn: Callable[[], float],
    param: Tensor,
    indices: Sequence[tuple[int, ...]] | None = None,
    relative_step: float = 1e-5,
) -> Array:
    """Central finite differences of ``loss_fn`` w.r.t. components of ``param``.

    ``loss_fn`` must recompute the loss from the current parameter values.
    When ``indices`` is None, every component is probed; the result matches
    ``param.data``'s shape either way (unprobed entries NaN).

    The default step keeps the probe's own truncation error below a 1e-4
    relative tolerance even where a rectifier kink sits between the two
    evaluation points; float64 roundoff stays orders of magnitude smaller.
    """
    flat = param.data.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    if indices is None:
        probe = range(flat.size)
    else:
        probe = [int(np.ravel_multi_index(ix, param.data.shape)) for ix in indices]
    for k in probe:
        orig = flat[k]
        h = relative_step * max(1.0, abs(orig))
        flat[k] = orig + h
        plus = loss_fn()
        flat[k] = orig - h
        minus = loss_fn()
        flat[k] = orig
        grad[k] = (plus - minus) / (2.0 * h)
    return grad.reshape(param.data.shape)
