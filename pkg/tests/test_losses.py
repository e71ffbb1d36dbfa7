import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hallucinet.losses import (
    DEFAULT_LAMBDA,
    attribute_loss,
    attribute_loss_grad,
    classification_loss,
    classification_loss_grad,
    hallucination_loss,
    hallucination_loss_grad,
    mtl_loss,
    quality_loss,
    quality_loss_grad,
)

finite = st.floats(-30, 30, allow_nan=False)


def fd_grad(f, x, h=1e-6):
    x = x.clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = f(x).item()
        flat[i] = old - h
        fm = f(x).item()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


# -- hallucination_loss -----------------------------------------------------------


def test_hallucination_examples():
    v = torch.tensor([0.3, -2.0, 5.0], dtype=torch.float64)
    assert hallucination_loss(v, v).item() == 0.0
    assert hallucination_loss([0.0], [math.log(3)]).item() == pytest.approx(0.0625, abs=1e-15)
    assert hallucination_loss([1e9], [-1e9]).item() == pytest.approx(1.0)


def test_hallucination_reduction_is_mean_over_dims_and_batch():
    a = torch.tensor([[0.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
    b = torch.tensor([[math.log(3), 0.0], [0.0, 0.0]], dtype=torch.float64)
    assert hallucination_loss(a, b).item() == pytest.approx(0.0625 / 4)


def test_hallucination_errors():
    with pytest.raises(ValueError):
        hallucination_loss([0.0, 1.0], [0.0])
    with pytest.raises(ValueError):
        hallucination_loss([float("nan")], [0.0])
    with pytest.raises(ValueError):
        hallucination_loss([float("inf")], [0.0])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite), arrays(np.float64, 8, elements=finite))
def test_hallucination_bounded_and_symmetric(a, b):
    b = b[: len(a)]
    ab = hallucination_loss(a, b).item()
    assert 0.0 <= ab <= 1.0
    assert ab == hallucination_loss(b, a).item()
    assert hallucination_loss(a, a).item() == 0.0


def test_hallucination_gradient_closed_form_matches_fd(rng):
    for _ in range(10):
        s = torch.tensor(rng.normal(size=(3, 4)))
        t = torch.tensor(rng.normal(size=(3, 4)))
        np.testing.assert_allclose(
            hallucination_loss_grad(s, t), fd_grad(lambda x: hallucination_loss(x, t), s), rtol=1e-5, atol=1e-10
        )


# -- mtl_loss ---------------------------------------------------------------------


def test_mtl_examples():
    assert DEFAULT_LAMBDA == 50.0
    assert mtl_loss(1.0, 0.01, 50) == pytest.approx(1.5)
    assert mtl_loss(0.7, 123.0, 0) == 0.7
    assert mtl_loss(0.0, 0.02, 50) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mtl_loss(1.0, 1.0, -0.1)


@given(st.floats(0, 10), st.floats(0, 1))
def test_mtl_affine_in_lambda(l_mt, l_h):
    vals = [mtl_loss(l_mt, l_h, lam) for lam in (0.0, 25.0, 50.0)]
    assert vals[0] == l_mt
    assert vals[1] - vals[0] == pytest.approx(25.0 * l_h, abs=1e-12)
    assert vals[2] - vals[0] == pytest.approx(50.0 * l_h, abs=1e-12)


# -- classification_loss ---------------------------------------------------------


@pytest.mark.parametrize("K", [2, 7, 48])
def test_uniform_logits_give_log_k(K):
    assert classification_loss(torch.zeros(K, dtype=torch.float64), 0).item() == pytest.approx(math.log(K))


def test_classification_examples():
    expected = math.log(math.e + math.e**2 + math.e**3) - 3
    assert classification_loss([1.0, 2.0, 3.0], 2).item() == pytest.approx(expected, abs=1e-14)
    assert classification_loss([0.0, 1e4], 1).item() == pytest.approx(0.0, abs=1e-12)
    batch = torch.tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]], dtype=torch.float64)
    assert classification_loss(batch, [2, 1]).item() == pytest.approx((expected + math.log(3)) / 2)
    with pytest.raises(ValueError):
        classification_loss([1.0, 2.0], 2)
    with pytest.raises(ValueError):
        classification_loss([1.0, 2.0], -1)


def test_classification_gradient_matches_fd(rng):
    for _ in range(10):
        logits = torch.tensor(rng.normal(size=(4, 5)))
        labels = torch.tensor(rng.integers(0, 5, 4))
        np.testing.assert_allclose(
            classification_loss_grad(logits, labels),
            fd_grad(lambda x: classification_loss(x, labels), logits),
            rtol=1e-5,
            atol=1e-10,
        )


# -- attribute_loss ----------------------------------------------------------------


def test_attribute_uniform_and_confident():
    arities = (4, 2, 3, 3, 3)
    groups = [torch.zeros(a, dtype=torch.float64) for a in arities]
    assert attribute_loss(groups, [0, 1, 2, 0, 1]).item() == pytest.approx(sum(math.log(a) for a in arities))
    labels = [3, 0, 2, 1, 1]
    confident = [torch.nn.functional.one_hot(torch.tensor(l), a).double() * 1e4 for l, a in zip(labels, arities)]
    assert attribute_loss(confident, labels).item() == pytest.approx(0.0, abs=1e-10)


def test_attribute_two_group_decomposition(rng):
    g1 = torch.tensor(rng.normal(size=(3, 4)))
    g2 = torch.tensor(rng.normal(size=(3, 2)))
    labels = torch.tensor([[0, 1], [3, 0], [2, 1]])

    def ce(logits, y):
        lse = np.log(np.exp(logits).sum(axis=1))
        return float(np.mean(lse - logits[np.arange(len(y)), y]))

    expected = ce(g1.numpy(), labels[:, 0].numpy()) + ce(g2.numpy(), labels[:, 1].numpy())
    assert attribute_loss([g1, g2], labels).item() == pytest.approx(expected, abs=1e-12)


def test_attribute_arity_mismatch():
    with pytest.raises(ValueError):
        attribute_loss([torch.zeros(3), torch.zeros(2)], [0, 1, 0])


def test_attribute_gradient_matches_fd(rng):
    groups = [torch.tensor(rng.normal(size=(2, a))) for a in (4, 2, 3)]
    labels = torch.tensor([[1, 0, 2], [3, 1, 0]])
    grads = attribute_loss_grad(groups, labels)
    for i, g in enumerate(groups):

        def f(x, i=i):
            gs = list(groups)
            gs[i] = x
            return attribute_loss(gs, labels)

        np.testing.assert_allclose(grads[i], fd_grad(f, g), rtol=1e-5, atol=1e-10)


# -- quality_loss ------------------------------------------------------------------


def test_quality_examples():
    assert quality_loss(0.3, 0.3).item() == 0.0
    assert quality_loss(0.5, 0.0).item() == pytest.approx(0.25)
    assert quality_loss([0.0, 1.0], [1.0, 1.0]).item() == pytest.approx(0.5)


def test_quality_gradient_matches_fd(rng):
    p = torch.tensor(rng.normal(size=6))
    t = torch.tensor(rng.normal(size=6))
    np.testing.assert_allclose(quality_loss_grad(p, t), fd_grad(lambda x: quality_loss(x, t), p), rtol=1e-5)


def test_closed_forms_agree_with_autograd(rng):
    s = torch.tensor(rng.normal(size=5), requires_grad=True)
    t = torch.tensor(rng.normal(size=5))
    hallucination_loss(s, t).backward()
    np.testing.assert_allclose(s.grad, hallucination_loss_grad(s.detach(), t), rtol=1e-12)
