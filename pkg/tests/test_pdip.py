from dataclasses import replace

import numpy as np
import pytest

from oracles import cg_solve
from patchqsm import neural
from patchqsm.neural import NetworkSpec, unet_backward, unet_forward
from patchqsm.patchwork import aggregate, extract
from patchqsm.pdip import (
    DivergenceError, PdipConfig, denoise_step, init_state, inversion_step, network_outputs,
    objective, objective_terms, patch_loss, patch_loss_gradient, run, write_history,
)
from patchqsm.phantom import PhantomSpec, Sphere, rasterize
from patchqsm.spectral import apply_kernel, build_dipole_kernel, forward_field

SPEC = NetworkSpec(levels=1, base_channels=2)


@pytest.fixture(scope="module")
def toy():
    """16^3 object with 8^3 patches at stride 4."""
    gt = rasterize(PhantomSpec((16, 16, 16), shapes=(Sphere((7, 8, 8), 3.5, 0.4),))).array
    d = build_dipole_kernel(gt.shape)
    phi = forward_field(gt, d) + np.random.default_rng(0).normal(0, 0.01, gt.shape)
    cfg = PdipConfig(mu=0.05, patch=8, stride=4, outer_iters=2, inner_epochs=1, init="zero")
    return gt, d, phi, cfg


def test_config_validation():
    with pytest.raises(ValueError):
        PdipConfig(mu=0)
    with pytest.raises(ValueError):
        PdipConfig(init="random")
    assert PdipConfig(patch=8).patch == (8, 8, 8)
    a, b = PdipConfig(seed=3), PdipConfig(seed=4)
    assert a.weight_seed() != a.noise_seed() and a.weight_seed() != b.weight_seed()


def test_patch_must_fit_network():
    d = build_dipole_kernel((12, 12, 12))
    with pytest.raises(ValueError, match="divisible"):
        init_state(np.zeros((12, 12, 12)), d, PdipConfig(patch=6, stride=3), NetworkSpec(levels=2))


@pytest.fixture
def rand16():
    rng = np.random.default_rng(5)
    d = build_dipole_kernel((16, 16, 16))
    return rng.normal(size=(16, 16, 16)), rng.normal(size=(16, 16, 16)), d


def _normal_op(d, mu):
    return lambda x: apply_kernel(apply_kernel(x, d.data), d.data) + mu * x


@pytest.mark.parametrize("mu", [1e-3, 0.05, 1.0])
def test_inversion_matches_cg(rand16, mu):
    phi, xbar, d = rand16
    chi = inversion_step(phi, d, mu, xbar)
    rhs = apply_kernel(phi, d.data) + mu * xbar
    ref = cg_solve(_normal_op(d, mu), rhs, tol=1e-13, maxiter=5000)
    assert np.linalg.norm(chi - ref) / np.linalg.norm(ref) <= 1e-6


@pytest.mark.parametrize("mu", [1e-4, 0.05, 10.0])
def test_inversion_normal_equations(rand16, mu):
    phi, xbar, d = rand16
    chi = inversion_step(phi, d, mu, xbar)
    a_t_phi = apply_kernel(phi, d.data)
    res = _normal_op(d, mu)(chi) - a_t_phi - mu * xbar
    assert np.linalg.norm(res) / (np.linalg.norm(a_t_phi) + mu * np.linalg.norm(xbar)) <= 1e-10


def test_inversion_large_mu_limit(rand16):
    phi, xbar, d = rand16
    chi = inversion_step(phi, d, 1e8, xbar)
    assert np.linalg.norm(chi - xbar) / np.linalg.norm(xbar) <= 1e-6
    with pytest.raises(ValueError):
        inversion_step(phi, d, 0.0, xbar)


def test_objective_trivial_cases(toy):
    gt, d, phi, cfg = toy
    state = init_state(np.zeros_like(phi), d, cfg, SPEC, params=neural.zero_parameters(SPEC))
    assert objective(state, np.zeros_like(phi), d, cfg.mu) == 0.0
    state.chi = gt.copy()
    outs = network_outputs(state)
    fid, _ = objective_terms(gt, phi, d, 0.0, state.grid, state.weights, outs)
    assert objective(state, phi, d, 0.0, outs) == fid
    assert fid == pytest.approx(np.sum((phi - forward_field(gt, d)) ** 2), rel=1e-14)


def test_objective_matches_naive_sum(toy):
    gt, d, phi, cfg = toy
    state = init_state(phi, d, cfg, SPEC)
    state.chi = gt + 0.1
    outs = network_outputs(state)
    r = phi - forward_field(state.chi, d)
    expected = sum(float(v) ** 2 for v in r.ravel())
    for i in range(len(state.grid)):
        block = state.chi[state.grid.slices(i)]
        w2 = state.weights.weight_sq[state.grid.slices(i)]
        expected += cfg.mu * sum(float(a) for a in (w2 * (block - outs[i]) ** 2).ravel())
    got = objective(state, phi, d, cfg.mu, outs)
    assert abs(got - expected) <= 1e-12 * expected


def test_zero_epochs_keep_parameters(toy):
    gt, d, phi, cfg = toy
    state = init_state(phi, d, cfg, SPEC)
    before = [p.copy() for p in state.params]
    denoise_step(state, gt, 0)
    assert all(np.array_equal(a, b) for a, b in zip(before, state.params))
    assert state.adam.t == 0


def test_denoising_reduces_loss():
    gt = rasterize(PhantomSpec((32, 32, 32), shapes=(Sphere((15, 16, 16), 6, 0.5),))).array
    d = build_dipole_kernel(gt.shape)
    cfg = PdipConfig(patch=16, stride=16, lr=1e-2, init="zero")
    state = init_state(forward_field(gt, d), d, cfg, SPEC)
    start = patch_loss(state, gt)
    denoise_step(state, gt, 50)
    assert patch_loss(state, gt) <= start


def test_patch_loss_gradient_finite_differences(toy):
    gt, d, phi, cfg = toy
    state = init_state(phi, d, cfg, SPEC)
    denoise_step(state, gt, 1)
    i = 5
    grads = patch_loss_gradient(state, gt, i)
    target = gt[state.grid.slices(i)]
    w2 = state.patch_weight_sq[i]

    def loss():
        out = unet_forward(SPEC, state.params, state.noise[i])[0]
        return float(np.sum(w2 * (out - target) ** 2))

    h = 1e-6
    rng = np.random.default_rng(6)
    for layer in (0, len(state.params) - 2):
        p = state.params[layer]
        for idx in (tuple(rng.integers(0, n) for n in p.shape) for _ in range(4)):
            old = p[idx]
            p[idx] = old + h
            up = loss()
            p[idx] = old - h
            down = loss()
            p[idx] = old
            assert grads[layer][idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-10)


def test_one_iteration_with_silent_network_is_tikhonov(toy):
    _, d, phi, cfg = toy
    cfg = replace(cfg, outer_iters=1, inner_epochs=0)
    res = run(phi, d, cfg, SPEC, params=neural.zero_parameters(SPEC))
    assert np.array_equal(res.chi, inversion_step(phi, d, cfg.mu, np.zeros_like(phi)))
    assert res.history[0].rel_change == float("inf")


def test_fixed_point():
    # a constant map is invisible to the dipole; a zero-weight network whose
    # final bias equals that constant reproduces every patch exactly
    c = 0.25
    d = build_dipole_kernel((16, 16, 16))
    phi = forward_field(np.full((16, 16, 16), c), d)
    params = neural.zero_parameters(SPEC)
    params[-1][:] = c
    cfg = PdipConfig(mu=0.1, patch=8, stride=4, inner_epochs=0, init="zero")
    state = init_state(phi, d, cfg, SPEC, params=params)
    state.chi = np.full((16, 16, 16), c)
    xbar = aggregate(network_outputs(state), state.grid, state.weights)
    chi = inversion_step(phi, d, cfg.mu, xbar)
    np.testing.assert_allclose(chi, state.chi, rtol=0, atol=1e-8)


def test_run_objective_and_noise_invariants(toy):
    gt, d, phi, cfg = toy
    seen = []
    res = run(phi, d, replace(cfg, outer_iters=3), SPEC,
              callback=lambda s: seen.append([z.copy() for z in s.noise]))
    for rec in res.history:
        assert np.isfinite(rec.objective)
        assert rec.objective <= rec.objective_before
    assert all(np.array_equal(a, b) for snap in seen[1:] for a, b in zip(seen[0], snap))
    assert [r.iteration for r in res.history] == [1, 2, 3]


def test_run_stops_at_tolerance(toy):
    _, d, phi, cfg = toy
    res = run(phi, d, replace(cfg, outer_iters=10, inner_epochs=0, tol=0.5), SPEC,
              params=neural.zero_parameters(SPEC))
    # zero network: iteration 2 reproduces iteration 1 exactly
    assert len(res.history) == 2 and res.history[-1].rel_change == 0.0


def test_run_deterministic(toy, tmp_path):
    _, d, phi, cfg = toy
    a = run(phi, d, cfg, SPEC)
    b = run(phi, d, cfg, SPEC)
    assert np.array_equal(a.chi, b.chi)
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))
    write_history(a.history, tmp_path / "a.csv")
    write_history(b.history, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "iter,objective,rel_change"


def test_divergence_reported(toy):
    _, d, phi, cfg = toy
    params = neural.zero_parameters(SPEC)
    params[-1][:] = np.inf
    with pytest.raises(DivergenceError):
        run(phi, d, replace(cfg, inner_epochs=0), SPEC, params=params)
