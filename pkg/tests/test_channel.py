import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from toib import autodiff as ad
from toib.autodiff import ShapeError, Tensor
from toib.channel import (DegenerateInputError, PowerAllocation, SnrSpec, calibrate_noise, draw_realization,
                          power_normalize, superpose, transmit)
from toib.gradcheck import check


def test_power_allocation():
    assert PowerAllocation.equal(4).powers == (0.25,) * 4
    with pytest.raises(ValueError):
        PowerAllocation((0.5, 0.6), 1.0)
    with pytest.raises(ValueError):
        PowerAllocation((1.5, -0.5), 1.0)


def test_snr_linear():
    assert SnrSpec(10).linear == pytest.approx(10.0)
    assert SnrSpec(-5).linear > 0


def test_normalize_examples():
    z = np.array([[0.6, 0.8], [0.0, 1.0]])
    np.testing.assert_allclose(power_normalize(Tensor(z)).data, z, rtol=1e-15)
    np.testing.assert_allclose(power_normalize(Tensor([[2.0, 0.0]])).data, [[1.0, 0.0]])
    with pytest.raises(DegenerateInputError):
        power_normalize(Tensor(np.zeros((3, 2))))


@given(arrays(np.float64, (4, 3), elements=st.floats(-10, 10)).filter(lambda a: np.sum(a * a) > 1e-6))
def test_normalize_unit_mean_square(z):
    out = power_normalize(Tensor(z)).data
    assert np.mean(np.sum(out ** 2, axis=1)) == pytest.approx(1.0, rel=1e-12)


def test_normalize_gradient_through_gain():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(5, 3))
    assert check(lambda z: ad.sum(ad.mul(power_normalize(z), w)), [rng.normal(size=(5, 3))]) < 1e-6


def test_superpose_examples():
    z = Tensor(np.random.default_rng(0).normal(size=(3, 2)))
    np.testing.assert_array_equal(superpose([z], PowerAllocation((1.0,))).data, z.data)
    # two coherent copies at half power each add in amplitude: 2 * sqrt(0.5) = sqrt(2)
    np.testing.assert_allclose(superpose([z, z], PowerAllocation.equal(2)).data, math.sqrt(2) * z.data)
    with pytest.raises(ShapeError):
        superpose([z], PowerAllocation.equal(2))
    with pytest.raises(ShapeError):
        superpose([z, Tensor(np.zeros((3, 3)))], PowerAllocation.equal(2))


@given(st.floats(-5, 5))
def test_superpose_linear(a):
    rng = np.random.default_rng(1)
    zs = [rng.normal(size=(4, 2)) for _ in range(3)]
    alloc = PowerAllocation((0.2, 0.3, 0.5))
    lhs = superpose([Tensor(a * z) for z in zs], alloc).data
    np.testing.assert_allclose(lhs, a * superpose([Tensor(z) for z in zs], alloc).data, atol=1e-12)


def test_superpose_power_conservation():
    rng = np.random.default_rng(2)
    n, d = 100_000, 4
    zs = [Tensor(rng.normal(size=(n, d)) / math.sqrt(d)) for _ in range(2)]
    s = superpose(zs, PowerAllocation.equal(2)).data
    assert abs(np.mean(np.sum(s * s, axis=1)) - 1.0) < 0.02
    zs = [Tensor(rng.normal(size=(n, d)) / math.sqrt(d)), Tensor(2 * rng.normal(size=(n, d)) / math.sqrt(d))]
    s = superpose(zs, PowerAllocation((0.25, 0.75))).data
    assert abs(np.mean(np.sum(s * s, axis=1)) / (0.25 + 0.75 * 4) - 1.0) < 0.02


def test_calibrate_examples():
    s = np.ones((10, 4))
    assert calibrate_noise(s, SnrSpec(0)) == pytest.approx(1.0)
    assert calibrate_noise(s, SnrSpec(10)) == pytest.approx(0.1)
    assert calibrate_noise(s, SnrSpec(math.inf)) == 0.0
    with pytest.raises(DegenerateInputError):
        calibrate_noise(np.zeros((3, 2)), SnrSpec(0))


def test_noiseless_awgn_identity():
    s = Tensor(np.random.default_rng(0).normal(size=(5, 3)))
    y = transmit(s, draw_realization("awgn", 0.0, 5, np.random.default_rng(1)), np.random.default_rng(1))
    np.testing.assert_array_equal(y.data, s.data)


def test_pure_noise_variance():
    rng = np.random.default_rng(3)
    y = transmit(Tensor(np.zeros((50_000, 2))), draw_realization("awgn", 0.3, 50_000, rng), rng).data
    assert abs(y.var() / 0.3 - 1) < 0.02


def test_rayleigh_second_moment():
    h = draw_realization("rayleigh", 1.0, 100_000, np.random.default_rng(4)).gain
    assert np.all(h > 0)
    assert abs(np.mean(h * h) - 1) < 0.02


def test_awgn_deterministic():
    s = Tensor(np.ones((4, 2)))
    ys = [transmit(s, draw_realization("awgn", 0.5, 4, r := np.random.default_rng(9)), r).data for _ in range(2)]
    assert ys[0].tobytes() == ys[1].tobytes()


def test_equalized_rayleigh_unbiased():
    rng = np.random.default_rng(5)
    n = 200_000
    s = np.tile([[1.0, -0.5]], (n, 1))
    y = transmit(Tensor(s), draw_realization("rayleigh", 0.01, n, rng), rng).data
    # y/h noise has heavy tails; the median is a robust unbiasedness check
    np.testing.assert_allclose(np.median(y, axis=0), [1.0, -0.5], atol=0.01)


def test_raw_rayleigh_scales_by_gain():
    rng = np.random.default_rng(6)
    real = draw_realization("rayleigh", 0.0, 3, rng, equalize=False)
    s = np.ones((3, 2))
    np.testing.assert_allclose(transmit(Tensor(s), real, rng).data, real.gain[:, None] * s)


def test_gradient_flows_through_signal_only():
    s = Tensor(np.ones((3, 2)), requires_grad=True)
    rng = np.random.default_rng(0)
    ad.backward(ad.sum(transmit(s, draw_realization("awgn", 1.0, 3, rng), rng)))
    np.testing.assert_array_equal(s.grad, np.ones((3, 2)))
