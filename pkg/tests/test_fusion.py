import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from amsl.fusion import FusionGate, fixed_fuse, fuse
from amsl.nn import DimensionError, numeric_grad, rel_error


def gate64(r=7, seed=0):
    return FusionGate(r, np.random.default_rng(seed), dtype=np.float64)


def test_weights_in_open_unit_interval_and_layout():
    g = gate64()
    alpha = g.fusion_weights(train=True)
    assert alpha.shape == (14,)
    assert np.all((alpha > 0) & (alpha < 1))


def test_eval_mode_pure():
    g = gate64()
    g.fusion_weights(train=True)
    np.testing.assert_array_equal(g.fusion_weights(), g.fusion_weights())


@pytest.mark.parametrize("train", [True, False])
def test_zero_affine_gives_half(train):
    g = gate64()
    g.dense.weight.value[...] = 0.0
    g.dense.bias.value[...] = 0.0
    np.testing.assert_array_equal(g.fusion_weights(train), np.full(14, 0.5))


@pytest.mark.parametrize("train", [True, False])
@pytest.mark.parametrize("seed", range(10))
def test_gate_gradients(train, seed):
    g = gate64(r=3, seed=seed)
    g.dense.bias.value[...] = np.random.default_rng(seed).standard_normal(6)
    g.bn.gamma.value[...] = 1.3
    g.bn.beta.value[...] = -0.2
    upstream = np.random.default_rng(seed + 50).standard_normal(6)
    saved = {k: v.copy() for k, v in g.buffers().items()}

    def objective():
        for k, v in g.buffers().items():
            v[...] = saved[k]
        return float((g.fusion_weights(train) * upstream).sum())

    alpha, cache = g.forward(train)
    g.backward(cache, upstream)
    for p in g.parameters():
        num = numeric_grad(objective, p.value, 1e-6)
        assert rel_error(p.grad, num).max() < 1e-3, p.name


def test_fuse_examples():
    np.testing.assert_allclose(fuse(np.array([1.0, 0.0]), np.array([0.0, 2.0]), 0.25, 0.5), [0.25, 1.0])
    v = np.array([3.0, -1.0])
    np.testing.assert_allclose(fuse(v, v, 0.3, 0.6), 0.9 * v)
    zg, zl = np.array([1.0, 2.0]), np.array([5.0, 7.0])
    np.testing.assert_allclose(fuse(zg, zl, 1.0, 0.0), zg)


def test_fixed_fuse_examples():
    np.testing.assert_array_equal(fixed_fuse(np.array([1.0, 1.0]), np.array([2.0, 3.0])), [3.0, 4.0])
    zg = np.array([0.5, -0.5])
    np.testing.assert_array_equal(fixed_fuse(zg, np.zeros(2)), zg)


def test_fuse_shape_mismatch():
    with pytest.raises(DimensionError):
        fuse(np.zeros(2), np.zeros(3), 0.5, 0.5)
    with pytest.raises(DimensionError):
        fixed_fuse(np.zeros((2, 2)), np.zeros(4))


vec = arrays(np.float64, 4, elements=st.floats(-100, 100))
unit = st.floats(0.01, 0.99)


@given(vec, vec, vec, unit, unit, st.floats(-3, 3))
def test_fuse_bilinear(a, b, c, ag, al, k):
    np.testing.assert_allclose(fuse(a + k * c, b, ag, al), fuse(a, b, ag, al) + k * fuse(c, np.zeros(4), ag, al),
                               atol=1e-9)
    np.testing.assert_allclose(fuse(a, b, ag, al), ag * fuse(a, np.zeros(4), 1, 0) + al * fuse(np.zeros(4), b, 0, 1),
                               atol=1e-9)
    np.testing.assert_array_equal(fixed_fuse(a, b), fuse(a, b, 1.0, 1.0))


@given(vec, vec)
def test_frozen_gate_half_of_fixed(a, b):
    np.testing.assert_allclose(fuse(a, b, 0.5, 0.5), 0.5 * fixed_fuse(a, b), atol=1e-12)
