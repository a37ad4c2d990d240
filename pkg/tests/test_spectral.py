import numpy as np
import pytest

from oracles import loop_dipole, naive_dft3, naive_forward_field
from patchqsm.spectral import (
    adjoint_field, build_dipole_kernel, dft3, forward_field, forward_imag_residual, idft3,
)
from patchqsm.volume import Volume


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_delta_has_flat_spectrum():
    a = np.zeros((4, 4, 4))
    a[0, 0, 0] = 1.0
    np.testing.assert_allclose(dft3(a), np.ones((4, 4, 4)), atol=1e-15)


def test_constant_concentrates_at_dc():
    s = dft3(np.full((4, 4, 4), 2.5))
    assert s[0, 0, 0] == pytest.approx(2.5 * 64)
    s[0, 0, 0] = 0
    assert np.max(np.abs(s)) < 1e-12


def test_dft_matches_naive_oracle():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(8, 8, 8))
    assert np.max(np.abs(dft3(a) - naive_dft3(a))) <= 1e-10


def test_round_trip_and_parseval():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(6, 7, 8)) + 1j * rng.normal(size=(6, 7, 8))
    assert rel(idft3(dft3(a)), a) <= 1e-12
    s = dft3(a)
    assert np.sum(np.abs(s) ** 2) == pytest.approx(a.size * np.sum(np.abs(a) ** 2), rel=1e-12)


def test_kernel_axis_values():
    d = build_dipole_kernel((8, 8, 8)).data
    assert d[0, 0, 3] == pytest.approx(-2.0 / 3.0)
    assert d[0, 0, 5] == pytest.approx(-2.0 / 3.0)
    assert d[2, 0, 0] == pytest.approx(1.0 / 3.0)
    assert d[0, 6, 0] == pytest.approx(1.0 / 3.0)
    assert d[0, 0, 0] == 0.0


def test_kernel_matches_loop_oracle_and_small_count():
    d = build_dipole_kernel((16, 16, 16)).data
    oracle = loop_dipole((16, 16, 16))
    np.testing.assert_allclose(d, oracle, atol=1e-15)
    assert np.count_nonzero(np.abs(d) < 0.1) == np.count_nonzero(np.abs(oracle) < 0.1)


def test_kernel_anisotropic_spacing_matches_loop():
    dims, spacing = (6, 5, 4), (1.0, 0.5, 2.0)
    np.testing.assert_allclose(build_dipole_kernel(dims, spacing).data,
                               loop_dipole(dims, spacing), atol=1e-15)


def test_kernel_range_and_symmetry():
    d = build_dipole_kernel((9, 8, 7)).data
    assert d.min() >= -2.0 / 3.0 - 1e-15 and d.max() <= 1.0 / 3.0 + 1e-15
    flipped = np.roll(d[::-1, ::-1, ::-1], 1, axis=(0, 1, 2))  # k -> -k
    np.testing.assert_array_equal(d, flipped)


def test_kernel_magic_angle_zero():
    # n = (1, 1, 1): kz^2/k^2 = 1/3 exactly representable up to rounding
    d = build_dipole_kernel((8, 8, 8)).data
    assert abs(d[1, 1, 1]) < 1e-15


def test_kernel_rejects_tiny_dims():
    with pytest.raises(ValueError):
        build_dipole_kernel((1, 4, 4))


def test_forward_zero_and_constant():
    k = build_dipole_kernel((6, 6, 6))
    assert np.all(forward_field(np.zeros((6, 6, 6)), k) == 0)
    assert np.max(np.abs(forward_field(np.full((6, 6, 6), 3.0), k))) < 1e-14


def test_forward_matches_naive_oracle():
    rng = np.random.default_rng(5)
    k = build_dipole_kernel((8, 8, 8))
    chi = rng.normal(size=(8, 8, 8))
    assert rel(forward_field(chi, k), naive_forward_field(chi, k.data)) <= 1e-10
    assert forward_imag_residual(chi, k) <= 1e-10


def test_forward_accepts_volume():
    k = build_dipole_kernel((4, 4, 4), (1.0, 1.0, 2.0))
    v = Volume(np.random.default_rng(0).normal(size=(4, 4, 4)), (1.0, 1.0, 2.0))
    out = forward_field(v, k)
    assert isinstance(out, Volume) and out.spacing == v.spacing
    with pytest.raises(ValueError):
        forward_field(np.zeros((4, 4, 5)), k)


def test_adjoint_inner_product():
    rng = np.random.default_rng(6)
    k = build_dipole_kernel((8, 8, 8))
    for _ in range(20):
        x, y = rng.normal(size=(2, 8, 8, 8))
        lhs = np.sum(forward_field(x, k) * y)
        rhs = np.sum(x * adjoint_field(y, k))
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_adjoint_equals_forward_and_kills_zero():
    rng = np.random.default_rng(7)
    k = build_dipole_kernel((7, 8, 9))
    x = rng.normal(size=(7, 8, 9))
    np.testing.assert_array_equal(adjoint_field(x, k), forward_field(x, k))
    assert np.all(adjoint_field(np.zeros((7, 8, 9)), k) == 0)


def test_forward_is_linear():
    rng = np.random.default_rng(8)
    k = build_dipole_kernel((8, 8, 8))
    x, y = rng.normal(size=(2, 8, 8, 8))
    lhs = forward_field(2.0 * x - 0.5 * y, k)
    rhs = 2.0 * forward_field(x, k) - 0.5 * forward_field(y, k)
    assert rel(lhs, rhs) <= 1e-12
