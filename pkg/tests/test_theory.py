import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ttrec import theory as th
from ttrec.backbone import CEBatch
from ttrec.numerics import finite_diff_hessian

from conftest import frozen_ssl_batch, tiny_inputs, tiny_model


def test_hessian_examples():
    np.testing.assert_array_equal(th.ce_hessian([0.0, 1.0, 0.0]), np.zeros((3, 3)))
    H = th.ce_hessian([0.5, 0.5])
    np.testing.assert_allclose(H, [[0.25, -0.25], [-0.25, 0.25]])
    np.testing.assert_allclose(np.linalg.eigvalsh(H), [0.0, 0.5], atol=1e-15)


def test_gradient_examples():
    g = th.ce_grad([0.0, 0.0], 0)
    np.testing.assert_allclose(g, [-0.5, 0.5])
    assert np.linalg.norm(g) == pytest.approx(math.sqrt(0.5))
    lo, hi, gnorm = th.check_ce_instance(th.CEInstance(np.array([3.0]), 0))
    assert gnorm == 0.0 and lo == hi == 0.0


def test_closed_forms_against_finite_differences(rng):
    g = rng.normal(size=5)
    H = finite_diff_hessian(lambda x: th.ce_value(x, 2), g)
    np.testing.assert_allclose(H, th.ce_hessian(th.CEInstance(g, 2).probs), atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-30, 30)), st.data())
def test_ce_hessian_bounds_hold(logits, data):
    c = data.draw(st.integers(0, logits.size - 1))
    lo, hi, gnorm = th.check_ce_instance(th.CEInstance(logits, c))
    assert lo >= -1e-8
    assert hi <= 2 + 1e-8
    assert gnorm <= 2 + 1e-8


def test_hessian_bound_report():
    rep = th.verify_theorem1(200, 10, np.random.default_rng(0))
    assert rep.ok and rep.trials == rep.passes == 200
    assert rep.worst_max_eig <= 1.0 + 1e-12  # sharper than the bound of 2
    empty = th.verify_theorem1(0, 10, np.random.default_rng(0))
    assert empty.to_dict() == {"trials": 0, "passes": 0, "worst_min_eig": None,
                               "worst_max_eig": None, "worst_grad_norm": None}


def test_perfect_alignment_decreases():
    rng = np.random.default_rng(5)
    inst = th.random_theorem2_instance(rng)
    inst.x_aug = inst.x.copy()
    inst.pseudo_label = inst.label
    alignment, decrease = th.theorem2_trial(inst)
    assert alignment == pytest.approx(np.sum(inst.sup_grad(inst.W) ** 2))
    if alignment > inst.eps:
        assert decrease > 0


def test_orthogonal_gradients_are_vacuous():
    W = np.zeros((2, 2))
    inst = th.Theorem2Instance(W, np.array([1.0, 0.0]), 0, np.array([0.0, 1.0]))
    alignment, decrease = th.theorem2_trial(inst)
    assert alignment == 0.0 and decrease is None


def test_surrogate_constants_and_bounds(rng):
    inst = th.random_theorem2_instance(rng)
    assert inst.step == pytest.approx(0.01 / (2 * 4))
    assert np.linalg.norm(inst.x) <= 1 and np.linalg.norm(inst.x_aug) <= 1 + 1e-12
    assert np.linalg.norm(inst.sup_grad(inst.W)) <= 2
    assert np.linalg.norm(inst.ssl_grad(inst.W)) <= 2


def test_alignment_descent_report():
    rep = th.verify_theorem2(200, np.random.default_rng(1))
    assert rep.trials == 200 and rep.condition_met > 0
    assert rep.ok and rep.passes == rep.condition_met
    assert rep.mean_decrease > 0 and rep.min_decrease > 0


def test_verification_report_is_seeded():
    a = th.verification_report(50, 50, seed=3)
    b = th.verification_report(50, 50, seed=3)
    assert th.report_json(a) == th.report_json(b)
    assert set(a) == {"theorem1", "theorem2"}


def test_alignment_diagnostic(rng):
    model, inputs = tiny_model(), tiny_inputs(rng)
    ce = CEBatch(rng.integers(0, 5, 6), rng.integers(0, 6, 6))
    ssl = frozen_ssl_batch(model, inputs, rng)
    a = th.measure_alignment(model, inputs, ce, ssl, T=0.5, tau=0.0, K=2)
    assert np.isfinite(a)
    g = {"w": np.array([1.0, 2.0])}
    assert th.alignment(g, g) == pytest.approx(5.0)
    assert th.alignment(g, {"w": np.zeros(2)}) == 0.0
