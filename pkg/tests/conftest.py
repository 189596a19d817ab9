from dataclasses import replace

import numpy as np
import pytest

from mcr_stitch import autodiff as ad
from mcr_stitch.aggregation import QuadrupleSet
from mcr_stitch.projector import TRAIN, named_parameters
from mcr_stitch.store import EmbeddingMatrix, unit_rows
from mcr_stitch.training import backward, compute_step_losses


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_unit_matrix(rng, rows, dim):
    """Normalized EmbeddingMatrix with rows drawn from a Gaussian."""
    return EmbeddingMatrix(
        unit_rows(rng.standard_normal((rows, dim))), normalized=True
    )


def gradcheck(analytic, numeric, rtol=1e-4, atol=1e-6):
    """Elementwise |a - f| <= atol + rtol * max(|a|, |f|), reporting the worst entry."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape
    bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    gap = np.abs(analytic - numeric)
    worst = np.unravel_index(np.argmax(gap - bound), gap.shape)
    assert np.all(gap <= bound), (
        f"gradient mismatch at {worst}: analytic {analytic[worst]!r} "
        f"vs numeric {numeric[worst]!r} (gap {gap[worst]:.3e}, bound {bound[worst]:.3e})"
    )


def random_quadruples(rng, n, dim):
    cols = [unit_rows(rng.standard_normal((n, dim))) for _ in range(4)]
    return QuadrupleSet(*cols, (np.arange(n) % 3).astype(np.uint8))


LOSS_TERM_NAMES = ("intra_squared", "intra_literal", "avc", "atc", "tvc", "ttc", "total")


def loss_term_node(batch, pp, cfg, term):
    """Fresh forward pass returning the named scalar loss node."""
    if term == "intra_literal":
        return compute_step_losses(batch, pp, replace(cfg, intra_squared=False)).intra
    losses = compute_step_losses(batch, pp, cfg)
    if term == "intra_squared":
        return losses.intra
    if term == "total":
        return losses.total
    return losses.inter[term]


def check_projector_gradients(batch, pp, cfg, terms=LOSS_TERM_NAMES, max_entries=None, rng=None):
    """Analytic vs central-difference gradients through the whole projector.

    Checks every parameter tensor for each requested loss term; with
    ``max_entries`` set, only a random subset of components per tensor is
    probed. Train-mode forward throughout.
    """
    pp.mode = TRAIN
    named = named_parameters(pp)
    params = [p for _, p in named]
    for term in terms:
        node = loss_term_node(batch, pp, cfg, term)
        grads = backward(node, params)
        for (name, p), g in zip(named, grads):
            if max_entries is not None and p.data.size > max_entries:
                assert rng is not None
                flat = rng.choice(p.data.size, size=max_entries, replace=False)
                indices = [np.unravel_index(int(k), p.data.shape) for k in flat]
            else:
                indices = None
            numeric = ad.numeric_gradient(
                lambda: loss_term_node(batch, pp, cfg, term).item(), p, indices=indices
            )
            mask = ~np.isnan(numeric)
            gradcheck(g[mask], numeric[mask])
