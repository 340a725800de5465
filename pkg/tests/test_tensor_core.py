import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import oracles
from posemoe.tensor_core import (DimensionError, NonFiniteError, Rng, backward, check_finite, gauss_sample,
                                 layer_norm, matmul, softmax, tensor)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_matmul_matches_triple_loop(n, k, m, seed):
    rng = Rng(seed)
    a, b = rng.normal((n, k)), rng.normal((k, m))
    out = matmul(torch.from_numpy(a), torch.from_numpy(b)).numpy()
    np.testing.assert_allclose(out, oracles.matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        matmul(torch.zeros(2, 3), torch.zeros(2, 3))
    with pytest.raises(DimensionError):
        matmul(torch.zeros(3), torch.zeros(3, 1))


def test_matmul_broadcasts_leading_axes(rng):
    a = torch.from_numpy(rng.normal((2, 3, 4, 5)))
    b = torch.from_numpy(rng.normal((5, 2)))
    out = matmul(a, b)
    assert out.shape == (2, 3, 4, 2)
    np.testing.assert_allclose(out[1, 2].numpy(), oracles.matmul(a[1, 2].numpy(), b.numpy()), atol=1e-12)


def test_softmax_rows_and_stability():
    x = torch.tensor([[1000.0, 1001.0, 1002.0], [-1e4, 0.0, 1e4]], dtype=torch.float64)
    y = softmax(x, -1)
    assert torch.isfinite(y).all()
    np.testing.assert_allclose(y.sum(-1).numpy(), 1.0, atol=1e-15)
    np.testing.assert_allclose(y[0].numpy(), oracles.softmax_row([0.0, 1.0, 2.0]), atol=1e-15)
    with pytest.raises(DimensionError):
        softmax(x, 2)


def test_softmax_extreme_logits_is_one_hot():
    y = softmax(torch.tensor([1e300, 0.0], dtype=torch.float64))
    assert y.tolist() == [1.0, 0.0]


def test_layer_norm_matches_loop(rng):
    x = rng.normal((3, 4, 6)) * 3 + 1
    g, b = rng.normal((6,)), rng.normal((6,))
    out = layer_norm(torch.from_numpy(x), torch.from_numpy(g), torch.from_numpy(b)).numpy()
    np.testing.assert_allclose(out, oracles.layer_norm(x, g, b), atol=1e-12)
    with pytest.raises(DimensionError):
        layer_norm(torch.from_numpy(x), torch.ones(5, dtype=torch.float64), torch.zeros(6, dtype=torch.float64))


def test_tensor_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteError):
        check_finite(torch.tensor([float("inf")]))
    assert tensor([1, 2]).dtype == torch.float64


def test_backward_needs_scalar_and_accumulates():
    w = tensor([1.0, 2.0, 3.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(w * 2)
    backward((w**2).sum())
    backward((w**2).sum())
    np.testing.assert_array_equal(w.grad.numpy(), [4.0, 8.0, 12.0])


def test_backward_rejects_non_finite_loss():
    w = tensor([0.0], requires_grad=True)
    with pytest.raises(NonFiniteError):
        backward((w / 0.0).sum())


def test_backward_matches_analytic_gradient(rng):
    a = torch.from_numpy(rng.normal((4, 3)))
    x = torch.from_numpy(rng.normal((3,))).requires_grad_(True)
    backward(torch.log(torch.exp(matmul(a, x[:, None])).sum()))
    z = a.numpy() @ x.detach().numpy()
    p = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(x.grad.numpy(), a.numpy().T @ p, atol=1e-12)


def test_rng_reproducible_and_children_independent():
    a, b = Rng(7), Rng(7)
    np.testing.assert_array_equal(a.normal((5,)), b.normal((5,)))
    c1 = Rng(7).child("x").normal((4,))
    parent = Rng(7)
    parent.normal((100,))
    np.testing.assert_array_equal(parent.child("x").normal((4,)), c1)
    assert not np.array_equal(Rng(7).child("x").normal((4,)), Rng(7).child("y").normal((4,)))
    assert not np.array_equal(Rng(7).child("x").normal((4,)), Rng(8).child("x").normal((4,)))
    assert Rng.algorithm == "PCG64"
    with pytest.raises(ValueError):
        Rng(-1)


def test_rng_known_values():
    # Pins the stream definition; a change here breaks every stored seed.
    expected = np.random.Generator(np.random.PCG64(np.random.SeedSequence(42))).standard_normal(3)
    np.testing.assert_array_equal(Rng(42).normal((3,)), expected)


def test_gauss_sample_is_standard_normal():
    x = gauss_sample(Rng(2024), (20000,)).numpy()
    assert stats.kstest(x, "norm").pvalue > 0.01
    assert abs(x.mean()) < 0.03 and abs(x.std() - 1) < 0.03
