"""Analytic gradients against central finite differences."""
import numpy as np
import pytest

from ttrec.backbone import CEBatch, analytic_gradients, ce_loss
from ttrec.numerics import finite_diff_gradient, relative_error
from ttrec.theory import flat_grads
from ttrec.ttt import ssl_loss_value

from conftest import frozen_ssl_batch, tiny_inputs, tiny_model

SSL_SELECTORS = ["ld", "lp", "ln", "lc", "total"]


def _fd(model, loss_fn):
    theta0 = model.flat()

    def f(theta):
        model.set_flat(theta)
        return loss_fn()

    try:
        return finite_diff_gradient(f, theta0, h=1e-5)
    finally:
        model.set_flat(theta0)


def ce_gradient_error(seed=0, candidates=True):
    rng = np.random.default_rng(seed)
    model, inputs = tiny_model(seed), tiny_inputs(rng)
    users = rng.integers(0, 5, 8)
    pos = rng.integers(0, 6, 8)
    cand = None
    if candidates:
        cand = np.stack([np.r_[p, rng.choice(np.setdiff1d(np.arange(6), [p]), 3, replace=False)]
                         for p in pos])
    batch = CEBatch(users, pos, cand)
    _, grads = analytic_gradients("ce", batch, model, inputs)
    numeric = _fd(model, lambda: ce_loss(model, inputs, users, pos, cand))
    return relative_error(flat_grads(grads), numeric)


def ssl_gradient_error(selector, seed=0, kernel="gaussian", alpha=0.7):
    rng = np.random.default_rng(seed)
    model, inputs = tiny_model(seed), tiny_inputs(rng)
    batch = frozen_ssl_batch(model, inputs, rng)
    kw = dict(alpha=alpha, T=0.5, tau=0.0, K=2, kernel=kernel)
    _, grads = analytic_gradients(selector, batch, model, inputs, **kw)
    numeric = _fd(model, lambda: ssl_loss_value(selector, batch, model, inputs, **kw))
    return relative_error(flat_grads(grads), numeric)


@pytest.mark.parametrize("candidates", [True, False])
@pytest.mark.parametrize("seed", [0, 1])
def test_ce_gradient(seed, candidates):
    assert ce_gradient_error(seed, candidates) < 1e-4


@pytest.mark.parametrize("selector", SSL_SELECTORS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ssl_gradients(selector, seed):
    assert ssl_gradient_error(selector, seed) < 1e-4


@pytest.mark.parametrize("selector", ["ld", "total"])
def test_student_t_kernel_gradients(selector):
    assert ssl_gradient_error(selector, 4, kernel="student_t") < 1e-4


def test_lc_gradient_is_sum_of_parts(rng):
    model, inputs = tiny_model(), tiny_inputs(rng)
    batch = frozen_ssl_batch(model, inputs, rng)
    kw = dict(T=0.5, tau=0.0, K=2)
    g = {s: flat_grads(analytic_gradients(s, batch, model, inputs, **kw)[1]) for s in ("lp", "ln", "lc")}
    np.testing.assert_allclose(g["lc"], g["lp"] + g["ln"], rtol=0, atol=1e-13)


def test_gradients_cover_every_parameter(rng):
    model, inputs = tiny_model(), tiny_inputs(rng)
    batch = frozen_ssl_batch(model, inputs, rng)
    _, grads = analytic_gradients("total", batch, model, inputs, T=0.5, tau=0.0, K=2)
    assert set(grads) == set(model.params)
    for name, g in grads.items():
        assert g.shape == model.params[name].shape
