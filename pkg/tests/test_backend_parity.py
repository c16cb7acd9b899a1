"""Compiled-vs-NumPy kernel agreement (skipped where only one is built)."""

import numpy as np
import pytest

from sbprop import backend
from sbprop.tensor import Rng

BACKENDS = backend.available_backends()

pytestmark = pytest.mark.skipif(
    len(BACKENDS) < 2, reason="compiled extension not built; nothing to compare")


def _pair(name):
    return BACKENDS["python"], BACKENDS["cython"]


@pytest.mark.parametrize("shape_a,shape_b,transpose_b", [
    ((5, 7), (7, 3), False),
    ((2, 4, 6), (2, 6, 3), False),
    ((3, 4, 5), (5, 2), False),
    ((2, 3, 4, 6), (2, 3, 5, 6), True),
    ((6, 8), (4, 8), True),
])
def test_matmul_parity(shape_a, shape_b, transpose_b):
    py, cy = _pair("matmul")
    rng = Rng(1)
    a, b = rng.normal(shape_a), rng.normal(shape_b)
    got = cy.matmul(a, b, transpose_b)
    want = py.matmul(a, b, transpose_b)
    assert got.shape == want.shape
    assert np.abs(got - want).max() < 1e-12 * max(1.0, np.abs(want).max())


@pytest.mark.parametrize("name,arity", [
    ("add", 2), ("mul", 2), ("relu", 1), ("gelu", 1), ("softmax_lastdim", 1),
])
def test_elementwise_parity(name, arity):
    py, cy = _pair(name)
    rng = Rng(2)
    args = [rng.normal((4, 9), std=2.0) for _ in range(arity)]
    got = getattr(cy, name)(*args)
    want = getattr(py, name)(*args)
    assert np.abs(got - want).max() < 1e-12


def test_scale_parity():
    py, cy = _pair("scale")
    x = Rng(3).normal((7, 5))
    assert np.array_equal(cy.scale(x, -2.5), py.scale(x, -2.5))


def test_layer_norm_parity():
    py, cy = _pair("layer_norm")
    rng = Rng(4)
    x = rng.normal((3, 6, 10), std=3.0)
    gamma, beta = rng.normal((10,)), rng.normal((10,))
    got = cy.layer_norm(x, gamma, beta, 1e-5)
    want = py.layer_norm(x, gamma, beta, 1e-5)
    assert np.abs(got - want).max() < 1e-12


def test_vjp_parity():
    py, cy = _pair("gelu_vjp")
    rng = Rng(5)
    x, dy = rng.normal((8, 8)), rng.normal((8, 8))
    assert np.abs(cy.gelu_vjp(x, dy) - py.gelu_vjp(x, dy)).max() < 1e-12
    assert np.array_equal(cy.relu_vjp(x, dy), py.relu_vjp(x, dy))

    p = py.softmax_lastdim(x)
    assert np.abs(cy.softmax_vjp(p, dy) - py.softmax_vjp(p, dy)).max() < 1e-12

    gamma = rng.normal((8,))
    for got, want in zip(cy.layer_norm_vjp(x, gamma, 1e-5, dy),
                         py.layer_norm_vjp(x, gamma, 1e-5, dy)):
        assert np.abs(got - want).max() < 1e-11
