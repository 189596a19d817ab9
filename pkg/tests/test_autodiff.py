"""Gradient checks for every tape operation against central finite differences."""

import numpy as np
import pytest

from mcr_stitch import autodiff as ad
from mcr_stitch.store import unit_rows

from conftest import gradcheck


def check_op(rng, build_loss, *param_shapes, scale=1.0):
    """Run build_loss(params...) forward/backward and compare to finite differences."""
    params = [ad.parameter(rng.standard_normal(shape) * scale) for shape in param_shapes]
    loss = build_loss(*params)
    ad.zero_grads(params)
    loss.backward()
    for p in params:
        numeric = ad.numeric_gradient(lambda: build_loss(*params).item(), p)
        gradcheck(p.grad, numeric)


def test_affine_values(rng):
    x = rng.standard_normal((4, 8))
    w = rng.standard_normal((3, 8))
    b = rng.standard_normal(3)
    out = ad.affine(ad.constant(x), ad.parameter(w), ad.parameter(b))
    assert np.allclose(out.data, x @ w.T + b)


def test_affine_gradients(rng):
    x_const = ad.constant(rng.standard_normal((5, 4)))

    def loss(w, b, x):
        out = ad.affine(x, w, b)
        return ad.mean_squared_rowdiff(out, ad.constant(np.zeros_like(out.data)))

    check_op(rng, lambda w, b, x: loss(w, b, x), (3, 4), (3,), (5, 4))
    # Constant inputs stay off the tape.
    out = ad.affine(x_const, ad.constant(np.zeros((2, 4))), ad.constant(np.zeros(2)))
    assert not out.requires_grad


def test_relu_gradients(rng):
    def loss(x):
        return ad.mean_squared_rowdiff(ad.relu(x), ad.constant(np.zeros(x.data.shape)))

    check_op(rng, loss, (6, 5))


def test_relu_output_nonnegative(rng):
    out = ad.relu(ad.constant(rng.standard_normal((10, 10))))
    assert out.data.min() >= 0


def test_normalize_rows_gradients(rng):
    target = unit_rows(rng.standard_normal((4, 6)))

    def loss(x):
        return ad.mean_squared_rowdiff(ad.normalize_rows(x), ad.constant(target))

    check_op(rng, loss, (4, 6), scale=2.0)


def test_batchnorm_train_gradients(rng):
    running_mean = np.zeros(5)
    running_var = np.ones(5)

    def loss(x, gamma, beta):
        out = ad.batchnorm_train(x, gamma, beta, running_mean.copy(), running_var.copy(), 0.1, 1e-5)
        return ad.mean_squared_rowdiff(out, ad.constant(np.zeros(x.data.shape)))

    check_op(rng, loss, (8, 5), (5,), (5,))


def test_batchnorm_train_updates_running_stats(rng):
    x = ad.constant(rng.standard_normal((16, 3)) * 2 + 1)
    gamma, beta = ad.parameter(np.ones(3)), ad.parameter(np.zeros(3))
    running_mean, running_var = np.zeros(3), np.ones(3)
    ad.batchnorm_train(x, gamma, beta, running_mean, running_var, 0.1, 1e-5)
    assert np.allclose(running_mean, 0.1 * x.data.mean(axis=0))
    assert np.allclose(running_var, 0.9 + 0.1 * x.data.var(axis=0))


def test_batchnorm_train_rejects_single_row(rng):
    with pytest.raises(ValueError, match="at least 2"):
        ad.batchnorm_train(
            ad.constant(np.ones((1, 3))),
            ad.parameter(np.ones(3)),
            ad.parameter(np.zeros(3)),
            np.zeros(3),
            np.ones(3),
            0.1,
            1e-5,
        )


def test_batchnorm_eval_gradients(rng):
    running_mean = rng.standard_normal(4)
    running_var = rng.uniform(0.5, 2.0, 4)

    def loss(x, gamma, beta):
        out = ad.batchnorm_eval(x, gamma, beta, running_mean, running_var, 1e-5)
        return ad.mean_squared_rowdiff(out, ad.constant(np.zeros(x.data.shape)))

    check_op(rng, loss, (6, 4), (4,), (4,))


def test_batchnorm_eval_is_pure(rng):
    x = ad.constant(rng.standard_normal((4, 3)))
    gamma, beta = ad.parameter(np.ones(3)), ad.parameter(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    a = ad.batchnorm_eval(x, gamma, beta, rm, rv, 1e-5)
    b = ad.batchnorm_eval(x, gamma, beta, rm, rv, 1e-5)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(rm, np.zeros(3)) and np.array_equal(rv, np.ones(3))


def test_info_nce_gradients(rng):
    def loss(x, z):
        return ad.info_nce(ad.normalize_rows(x), ad.normalize_rows(z), 0.5)

    check_op(rng, loss, (6, 4), (6, 4))


def test_info_nce_low_temperature_gradients(rng):
    z = ad.constant(unit_rows(rng.standard_normal((5, 7))))

    def loss(x):
        return ad.info_nce(ad.normalize_rows(x), z, 0.05)

    params = [ad.parameter(rng.standard_normal((5, 7)))]
    loss_node = loss(*params)
    loss_node.backward()
    numeric = ad.numeric_gradient(lambda: loss(*params).item(), params[0], relative_step=1e-4)
    gradcheck(params[0].grad, numeric, rtol=1e-3, atol=1e-5)


def test_mean_row_norm_gradients(rng):
    target = ad.constant(rng.standard_normal((5, 3)))

    def loss(a):
        return ad.mean_row_norm(a, target)

    check_op(rng, loss, (5, 3))


def test_scalar_arithmetic_gradients(rng):
    def loss(x):
        a = ad.mean_squared_rowdiff(x, ad.constant(np.zeros(x.data.shape)))
        b = ad.mean_row_norm(x, ad.constant(np.ones(x.data.shape)))
        return a * 0.3 + b * 0.7 + 1.5

    check_op(rng, loss, (4, 4))


def test_shared_subexpression_accumulates(rng):
    # One node feeding two losses receives gradient from both paths.
    x = ad.parameter(rng.standard_normal((3, 3)))
    shared = ad.relu(x)
    loss = ad.mean_squared_rowdiff(shared, ad.constant(np.zeros((3, 3)))) + ad.mean_squared_rowdiff(
        shared, ad.constant(np.ones((3, 3)))
    )
    loss.backward()
    numeric = ad.numeric_gradient(
        lambda: (
            ad.mean_squared_rowdiff(ad.relu(x), ad.constant(np.zeros((3, 3))))
            + ad.mean_squared_rowdiff(ad.relu(x), ad.constant(np.ones((3, 3))))
        ).item(),
        x,
    )
    gradcheck(x.grad, numeric)


def test_backward_requires_scalar_root(rng):
    x = ad.parameter(rng.standard_normal((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        ad.relu(x).backward()


def test_constant_graphs_skip_tape(rng):
    out = ad.info_nce(
        ad.constant(unit_rows(rng.standard_normal((4, 4)))),
        ad.constant(unit_rows(rng.standard_normal((4, 4)))),
        0.1,
    )
    assert not out.requires_grad and out._backward is None
