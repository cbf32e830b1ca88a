import itertools
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from agra.losses import (F1_EPS, IGNORE, Batch, LossError, LossKind, loss_and_gradient, loss_gradient,
                         loss_value, parse_loss, singleton_gradient, singleton_logit_grads)
from agra.model import LinearModel

from conftest import finite_difference, gradient_mismatches

SINGLE = [LossKind.CROSS_ENTROPY, LossKind.F1_BINARY, LossKind.F1_MACRO_SINGLE]
MULTI = [LossKind.BCE, LossKind.F1_MACRO_MULTI, LossKind.MASKED_BCE]


def random_case(kind, k, d, m, sparse, seed):
    rng = np.random.default_rng(seed)
    model = LinearModel(rng.normal(scale=0.5, size=(k, d)), rng.normal(scale=0.5, size=k))
    X = rng.normal(size=(m, d))
    if sparse:
        X[rng.random((m, d)) < 0.7] = 0.0
    if kind.multi_label:
        ys = rng.integers(0, 2, (m, k))
        mask = rng.random((m, k)) < 0.75 if kind is LossKind.MASKED_BCE else None
    else:
        ys = rng.integers(0, k, m)
        mask = None
    return model, Batch(sp.csr_matrix(X), ys), mask


def test_f1_macro_one_hot_predictions():
    model = LinearModel([[1000.0], [-1000.0]], [0.0, 0.0])
    batch = Batch(sp.csr_matrix([[1.0], [-1.0]]), [0, 1])
    assert loss_value(LossKind.F1_MACRO_SINGLE, model, batch) == pytest.approx(1 - 2 / (2 + F1_EPS), rel=1e-12)


def test_f1_macro_uniform_probabilities():
    batch = Batch(sp.csr_matrix([[1.0], [2.0]]), [0, 1])
    # tp = fp = fn = 0.5 per class
    value = loss_value(LossKind.F1_MACRO_SINGLE, LinearModel.zeros(2, 1), batch)
    assert value == pytest.approx(1 - 1 / (2 + F1_EPS), rel=1e-12)


@pytest.mark.parametrize("k", [2, 3, 7])
def test_cross_entropy_zero_model_is_log_k(k, rng):
    batch = Batch(sp.csr_matrix(rng.normal(size=(5, 4))), rng.integers(0, k, 5))
    assert loss_value(LossKind.CROSS_ENTROPY, LinearModel.zeros(k, 4), batch) == pytest.approx(math.log(k), abs=1e-15)


def test_cross_entropy_closed_form_gradient():
    g = loss_gradient(LossKind.CROSS_ENTROPY, LinearModel.zeros(2, 1), Batch(sp.csr_matrix([[1.0]]), [0]))
    np.testing.assert_allclose(g.values, [-0.5, 0.5, -0.5, 0.5], atol=1e-15)


def test_f1_binary_definition(rng):
    model = LinearModel(rng.normal(size=(2, 3)), rng.normal(size=2))
    X = rng.normal(size=(6, 3))
    y = np.array([1, 0, 1, 1, 0, 0])
    z = X @ model.weights.T + model.bias
    p1 = np.exp(z[:, 1]) / np.exp(z).sum(axis=1)
    tp, fp, fn = (p1 * y).sum(), (p1 * (1 - y)).sum(), ((1 - p1) * y).sum()
    expected = 1 - 2 * tp / (2 * tp + fp + fn + F1_EPS)
    assert loss_value(LossKind.F1_BINARY, model, Batch(sp.csr_matrix(X), y)) == pytest.approx(expected, rel=1e-13)


def test_f1_binary_negative_singleton_has_zero_gradient():
    # with only negatives tp is identically 0, so the loss is constant at 1
    model = LinearModel([[0.4, -0.2], [-0.3, 0.1]], [0.2, -0.5])
    batch = Batch(sp.csr_matrix([[1.0, 2.0]]), [0])
    assert loss_value(LossKind.F1_BINARY, model, batch) == 1.0
    assert not np.any(loss_gradient(LossKind.F1_BINARY, model, batch).values)


def test_f1_binary_positive_pushes_positive_probability_up():
    model = LinearModel.zeros(2, 1)
    g = loss_gradient(LossKind.F1_BINARY, model, Batch(sp.csr_matrix([[1.0]]), [1]))
    w = g.weight_matrix()
    assert w[1, 0] < 0 < w[0, 0]


def test_f1_multi_definition(rng):
    model = LinearModel(rng.normal(size=(3, 2)), rng.normal(size=3))
    X = rng.normal(size=(5, 2))
    Y = rng.integers(0, 2, (5, 3))
    P = 1 / (1 + np.exp(-(X @ model.weights.T + model.bias)))
    f1 = [2 * (P[:, k] * Y[:, k]).sum() / (P[:, k].sum() + Y[:, k].sum() + F1_EPS) for k in range(3)]
    value = loss_value(LossKind.F1_MACRO_MULTI, model, Batch(sp.csr_matrix(X), Y))
    assert value == pytest.approx(1 - np.mean(f1), rel=1e-13)


def brute_force_masked_bce(model, X, Y, mask):
    """Per-entry loop over the masked BCE; returns (loss, weight grad, bias grad)."""
    K, D = model.weights.shape
    retained = mask.sum(axis=0)
    classes = [k for k in range(K) if retained[k] > 0]
    loss, gw, gb = 0.0, np.zeros((K, D)), np.zeros(K)
    for k in classes:
        for t in range(X.shape[0]):
            if not mask[t, k]:
                continue
            z = X[t] @ model.weights[k] + model.bias[k]
            p = 1 / (1 + math.exp(-z))
            y = Y[t, k]
            loss += -(y * math.log(p) + (1 - y) * math.log(1 - p)) / retained[k] / len(classes)
            gw[k] += (p - y) * X[t] / retained[k] / len(classes)
            gb[k] += (p - y) / retained[k] / len(classes)
    return loss, gw, gb


def test_masked_bce_matches_brute_force(rng):
    model = LinearModel(rng.normal(size=(4, 3)), rng.normal(size=4))
    X = rng.normal(size=(6, 3))
    Y = rng.integers(0, 2, (6, 4))
    mask = rng.random((6, 4)) < 0.6
    mask[:, 2] = False
    loss, g = loss_and_gradient(LossKind.MASKED_BCE, model, Batch(sp.csr_matrix(X), Y), mask)
    ref_loss, gw, gb = brute_force_masked_bce(model, X, Y, mask)
    assert loss == pytest.approx(ref_loss, rel=1e-12)
    np.testing.assert_allclose(g.weight_matrix(), gw, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(g.bias_block, gb, rtol=1e-12, atol=1e-15)
    assert not np.any(g.slice(2))


def test_masked_bce_ignore_sentinel_equals_mask(rng):
    model = LinearModel(rng.normal(size=(3, 2)), rng.normal(size=3))
    X = sp.csr_matrix(rng.normal(size=(4, 2)))
    Y = rng.integers(0, 2, (4, 3))
    mask = rng.random((4, 3)) < 0.5
    a = loss_gradient(LossKind.MASKED_BCE, model, Batch(X, Y), mask)
    b = loss_gradient(LossKind.MASKED_BCE, model, Batch(X, np.where(mask, Y, IGNORE)))
    np.testing.assert_array_equal(a.values, b.values)


def test_masked_extra_sample_contributes_nothing(rng):
    model = LinearModel(rng.normal(size=(3, 2)), rng.normal(size=3))
    X = rng.normal(size=(4, 2))
    Y = rng.integers(0, 2, (4, 3))
    base = loss_gradient(LossKind.MASKED_BCE, model, Batch(sp.csr_matrix(X), Y), np.ones((4, 3), bool))
    X5 = np.vstack([X, rng.normal(size=(1, 2)) * 10])
    Y5 = np.vstack([Y, [[1, 0, 1]]])
    mask5 = np.vstack([np.ones((4, 3), bool), np.zeros((1, 3), bool)])
    extra = loss_gradient(LossKind.MASKED_BCE, model, Batch(sp.csr_matrix(X5), Y5), mask5)
    np.testing.assert_array_equal(base.values, extra.values)


def test_bce_equals_unmasked_masked_bce(rng):
    model = LinearModel(rng.normal(size=(3, 2)), rng.normal(size=3))
    batch = Batch(sp.csr_matrix(rng.normal(size=(4, 2))), rng.integers(0, 2, (4, 3)))
    np.testing.assert_array_equal(loss_gradient(LossKind.BCE, model, batch).values,
                                  loss_gradient(LossKind.MASKED_BCE, model, batch).values)


@pytest.mark.parametrize("kind", SINGLE + MULTI)
def test_finite_differences_spot(kind):
    k = 2 if kind is LossKind.F1_BINARY else 3
    model, batch, mask = random_case(kind, k, 4, 5, False, 7)
    g = loss_gradient(kind, model, batch, mask).values
    assert gradient_mismatches(g, finite_difference(kind, model, batch, mask)) == []


@pytest.mark.parametrize("kind", SINGLE + MULTI)
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_f1_losses_in_unit_interval_and_singleton_consistency(kind, seed):
    k = 2 if kind is LossKind.F1_BINARY else 4
    model, batch, _ = random_case(kind, k, 3, 6, True, seed)
    model = LinearModel(model.weights * 5, model.bias * 5)
    if kind in (LossKind.F1_BINARY, LossKind.F1_MACRO_SINGLE, LossKind.F1_MACRO_MULTI):
        assert 0.0 <= loss_value(kind, model, batch) <= 1.0
    if kind is LossKind.MASKED_BCE:
        return
    d_z = singleton_logit_grads(kind, model, batch)
    X = batch.xs.toarray()
    for t in range(len(batch)):
        g = singleton_gradient(kind, model, batch, t)
        np.testing.assert_allclose(g.weight_matrix(), np.outer(d_z[t], X[t]), rtol=1e-12, atol=1e-300)
        np.testing.assert_allclose(g.bias_block, d_z[t], rtol=1e-12, atol=1e-300)


def test_large_logits_are_finite():
    model = LinearModel([[800.0], [-800.0]], [0.0, 0.0])
    batch = Batch(sp.csr_matrix([[1.0], [-1.0]]), [1, 0])
    for kind in SINGLE:
        loss, g = loss_and_gradient(kind, model, batch)
        assert math.isfinite(loss) and np.all(np.isfinite(g.values))
    mb = Batch(sp.csr_matrix([[1.0], [-1.0]]), [[0, 1], [1, 0]])
    for kind in MULTI:
        loss, g = loss_and_gradient(kind, model, mb)
        assert math.isfinite(loss) and np.all(np.isfinite(g.values))


def test_errors():
    model = LinearModel.zeros(3, 2)
    single = Batch(sp.csr_matrix([[1.0, 0.0]]), [0])
    with pytest.raises(LossError):
        loss_value(LossKind.CROSS_ENTROPY, model, Batch(sp.csr_matrix((0, 2)), np.zeros(0, int)))
    with pytest.raises(LossError):
        loss_value(LossKind.F1_BINARY, model, single)
    with pytest.raises(LossError):
        loss_value(LossKind.BCE, model, single)
    with pytest.raises(LossError):
        loss_value(LossKind.CROSS_ENTROPY, model, single, mask=np.ones((1, 3), bool))
    with pytest.raises(LossError):
        loss_value(LossKind.CROSS_ENTROPY, model, Batch(sp.csr_matrix([[1.0, 0.0]]), [3]))


def test_parse_loss_aliases():
    assert parse_loss("f1", False, 2) is LossKind.F1_BINARY
    assert parse_loss("f1", False, 5) is LossKind.F1_MACRO_SINGLE
    assert parse_loss("f1", True, 5) is LossKind.F1_MACRO_MULTI
    assert parse_loss("ce", True, 5) is LossKind.BCE
    assert parse_loss("CE", False, 5) is LossKind.CROSS_ENTROPY
    with pytest.raises(LossError):
        parse_loss("hinge", False, 2)
