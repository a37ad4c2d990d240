import numpy as np
import pytest

from patchqsm.baselines import (
    SolverConfigError, TgvConfig, TkdConfig, TvConfig, grad3, grad3_adjoint, param_search,
    recon_tgv, recon_tkd, recon_tv, sym_grad3, sym_grad3_adjoint, tgv_value, tv_value,
)
from patchqsm.phantom import PhantomSpec, Sphere, rasterize
from patchqsm.spectral import apply_kernel, build_dipole_kernel, dft3, forward_field, idft3


@pytest.fixture(scope="module")
def small():
    """24^3 two-sphere object, its kernel and a noisy field."""
    spec = PhantomSpec((24, 24, 24), shapes=(Sphere((9, 11, 12), 4, 0.5), Sphere((15, 13, 11), 3, -0.3)))
    gt = rasterize(spec).array
    d = build_dipole_kernel(gt.shape)
    phi = forward_field(gt, d) + np.random.default_rng(0).normal(0, 0.01, gt.shape)
    return gt, d, phi


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_config_validation():
    with pytest.raises(SolverConfigError):
        TkdConfig(0.7)
    with pytest.raises(SolverConfigError):
        TkdConfig(0.0)
    TkdConfig(2.0 / 3.0)
    with pytest.raises(SolverConfigError):
        TvConfig(tau=0.5, sigma=0.5)
    with pytest.raises(SolverConfigError):
        TvConfig(lam=0.0)
    with pytest.raises(SolverConfigError):
        TgvConfig(tau=0.25, sigma=0.25)
    assert TgvConfig(alpha1=0.3).alpha0 == 0.6


def test_tkd_zero_field():
    d = build_dipole_kernel((8, 8, 8))
    assert not recon_tkd(np.zeros((8, 8, 8)), d).any()


def test_tkd_recovers_band_projection():
    rng = np.random.default_rng(1)
    d = build_dipole_kernel((16, 16, 16))
    t = 0.2
    band = np.abs(d.data) >= t
    band[0, 0, 0] = False
    chi = np.real(idft3(band * dft3(rng.normal(size=(16, 16, 16)))))
    phi = forward_field(chi, d)
    out = recon_tkd(phi, d, TkdConfig(t))
    assert rel(out, chi) <= 1e-10
    # idempotent on its own band-projected output
    assert rel(recon_tkd(forward_field(out, d), d, TkdConfig(t)), out) <= 1e-10


def test_tkd_largest_threshold_is_scaled_sign():
    rng = np.random.default_rng(2)
    d = build_dipole_kernel((8, 10, 12))
    phi = rng.normal(size=(8, 10, 12))
    expected = 1.5 * np.where(d.data < 0, -1.0, 1.0) * dft3(phi)
    expected[0, 0, 0] = 0
    np.testing.assert_allclose(recon_tkd(phi, d, TkdConfig(2.0 / 3.0)), np.real(idft3(expected)),
                               rtol=0, atol=1e-12)


def test_difference_operator_adjoints():
    rng = np.random.default_rng(3)
    u = rng.normal(size=(5, 6, 7))
    p = rng.normal(size=(3, 5, 6, 7))
    assert np.sum(grad3(u) * p) == pytest.approx(np.sum(u * grad3_adjoint(p)), rel=1e-12)
    q = rng.normal(size=(3, 3, 5, 6, 7))
    assert np.sum(sym_grad3(p) * q) == pytest.approx(np.sum(p * sym_grad3_adjoint(q)), rel=1e-12)


def test_gradient_norm_bound():
    # power iteration on grad^T grad stays under the step-size bound of 12
    x = np.random.default_rng(4).normal(size=(12, 12, 12))
    for _ in range(200):
        x = grad3_adjoint(grad3(x))
        x /= np.linalg.norm(x)
    assert np.linalg.norm(grad3_adjoint(grad3(x))) <= 12.0


def test_tv_zero_field():
    d = build_dipole_kernel((12, 12, 12))
    assert np.linalg.norm(recon_tv(np.zeros((12, 12, 12)), d, TvConfig(lam=0.1, iterations=50))) <= 1e-8
    chi, w = recon_tgv(np.zeros((12, 12, 12)), d, TgvConfig(alpha1=0.1, iterations=50), return_w=True)
    assert np.linalg.norm(chi) <= 1e-8 and np.linalg.norm(w) <= 1e-8


def test_tv_small_weight_is_least_squares(small):
    _, d, phi = small
    # a large primal step converges quickly in the data term; tau * sigma * 12 = 1
    cfg = TvConfig(lam=1e-12, iterations=1000, tau=100.0, sigma=1.0 / 1200.0)
    chi = recon_tv(phi, d, cfg)
    grad = apply_kernel(apply_kernel(chi, d.data) - phi, d.data)
    assert np.linalg.norm(grad) / np.linalg.norm(apply_kernel(phi, d.data)) <= 1e-3


@pytest.mark.parametrize("method", ["tv", "tgv"])
def test_objective_non_increasing(small, method):
    _, d, phi = small
    hist = []
    if method == "tv":
        recon_tv(phi, d, TvConfig(lam=3e-3, iterations=300), hist)
    else:
        recon_tgv(phi, d, TgvConfig(alpha1=3e-3, iterations=300), hist)
    obj = np.array([v for it, v in hist if it >= 10])
    assert np.all(np.diff(obj) <= 1e-12 * np.abs(obj[:-1]))


def test_tv_beats_tkd(small):
    gt, d, phi = small
    tkd = param_search(lambda t: recon_tkd(phi, d, TkdConfig(t)), gt, [0.2, 0.4, 2.0 / 3.0])
    tv = param_search(lambda lam: recon_tv(phi, d, TvConfig(lam=lam, iterations=300)), gt, [1e-3, 3e-3, 1e-2])
    assert tv[2][[v for v, _ in tv[2]].index(tv[0])][1] < min(e for _, e in tkd[2])


def test_tgv_large_alpha0_approaches_tv(small):
    _, d, phi = small
    # the gap shrinks with iterations (about 1.1% at 500, 0.3% at 1500)
    tv = recon_tv(phi, d, TvConfig(lam=3e-3, iterations=1500))
    tgv = recon_tgv(phi, d, TgvConfig(alpha1=3e-3, alpha0=1e6, iterations=1500))
    assert rel(tgv, tv) <= 0.01


def test_tgv_cheaper_than_tv_on_ramp():
    n, a1 = 16, 1.0
    ramp = np.broadcast_to(np.arange(n, dtype=float)[:, None, None], (n, n, n))
    w = np.zeros((3, n, n, n))
    w[0] = 1.0  # constant slope field: only the last slice pays the first-order term
    assert tgv_value(ramp, w, a1, 2 * a1) < a1 * tv_value(ramp)
    assert a1 * tv_value(ramp) == pytest.approx(a1 * (n - 1) * n * n)


@pytest.mark.parametrize("method", ["tkd", "tv", "tgv"])
def test_constant_offset_in_field_is_ignored(small, method):
    _, d, phi = small
    fn = {
        "tkd": lambda f: recon_tkd(f, d),
        "tv": lambda f: recon_tv(f, d, TvConfig(lam=3e-3, iterations=30)),
        "tgv": lambda f: recon_tgv(f, d, TgvConfig(alpha1=3e-3, iterations=30)),
    }[method]
    np.testing.assert_allclose(fn(phi + 0.37), fn(phi), rtol=0, atol=1e-10)


def test_param_search_rules():
    gt = np.ones((4, 4, 4))
    best, rec, table = param_search(lambda v: gt * v, gt, [2.0])
    assert best == 2.0 and table == [(2.0, 100.0)]
    # 0.5 and 1.5 tie at 50%; the smaller wins regardless of grid order
    best, rec, _ = param_search(lambda v: gt * v, gt, [1.5, 0.5, 3.0])
    assert best == 0.5
    np.testing.assert_array_equal(rec, 0.5 * gt)
    best, _, _ = param_search(lambda v: gt * v, gt, [0.2, 1.0, 1.7])
    assert best == 1.0
    with pytest.raises(ValueError):
        param_search(lambda v: gt, gt, [])
