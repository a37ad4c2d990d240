"""Patch-based deep-prior susceptibility reconstruction.

Solves

    min_{theta, chi} ||phi - A chi||^2 + mu * sum_p ||W_p (R_p chi - f_theta(z_p))||^2

by alternating a denoising step (Adam on the network weights with ``chi``
fixed) and an inversion step (exact minimization over ``chi``). With the
``1/sqrt(coverage)`` weights the patch term equals ``mu ||chi - xbar||^2``
plus a constant, where ``xbar`` is the averaged overlap-add of the network
outputs, so the inversion step is a diagonal solve in k-space.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import neural
from .baselines import TkdConfig, recon_tkd
from .neural import AdamState, NetworkSpec
from .patchwork import PatchGrid, WeightField, aggregate, coverage, extract, plan_patches
from .spectral import DipoleKernel, apply_kernel, dft3, idft3

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """The objective became non-finite."""


@dataclass(frozen=True)
class PdipConfig:
    mu: float = 0.05
    patch: tuple[int, int, int] = (16, 16, 16)
    stride: tuple[int, int, int] = (8, 8, 8)
    outer_iters: int = 20
    inner_epochs: int = 25
    lr: float = 1e-3
    tol: float = 1e-4
    seed: int = 0
    init: str = "tkd"
    tkd_threshold: float = 0.2

    def __post_init__(self):
        for name in ("patch", "stride"):
            v = getattr(self, name)
            object.__setattr__(self, name, (int(v),) * 3 if np.isscalar(v) else tuple(int(a) for a in v))
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.init not in ("zero", "tkd"):
            raise ValueError(f"init must be 'zero' or 'tkd', got {self.init!r}")
        if self.outer_iters < 1 or self.inner_epochs < 0 or self.lr <= 0 or self.tol < 0:
            raise ValueError("need outer_iters >= 1, inner_epochs >= 0, lr > 0, tol >= 0")

    def weight_seed(self) -> int:
        return int(np.random.SeedSequence([self.seed, 1]).generate_state(1, np.uint64)[0])

    def noise_seed(self) -> int:
        return int(np.random.SeedSequence([self.seed, 2]).generate_state(1, np.uint64)[0])


@dataclass
class IterationRecord:
    iteration: int
    objective: float  # after the inversion step
    objective_before: float  # after the denoising step, before inversion
    rel_change: float


@dataclass
class SolverState:
    chi: np.ndarray
    params: list
    adam: AdamState
    noise: list  # fixed network inputs, one per patch
    spec: NetworkSpec
    grid: PatchGrid
    weights: WeightField
    iteration: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.patch_weight_sq = extract(self.weights.weight_sq, self.grid)


def _arr(v):
    return np.asarray(getattr(v, "array", v), dtype=np.float64)


def _kern(kernel):
    return kernel.data if isinstance(kernel, DipoleKernel) else np.asarray(kernel)


def init_state(phi, kernel, cfg: PdipConfig, spec: NetworkSpec, params=None) -> SolverState:
    phi = _arr(phi)
    spec.check_input(cfg.patch)
    grid = plan_patches(phi.shape, cfg.patch, cfg.stride)
    if cfg.init == "tkd":
        chi = recon_tkd(phi, kernel, TkdConfig(cfg.tkd_threshold))
    else:
        chi = np.zeros_like(phi)
    if params is None:
        params = neural.init_weights(spec, cfg.weight_seed())
    else:
        neural.check_parameters(spec, params)
        params = [p.copy() for p in params]
    return SolverState(
        chi=chi,
        params=params,
        adam=AdamState.zeros_like(params, lr=cfg.lr),
        noise=neural.make_noise_inputs(grid, cfg.noise_seed()),
        spec=spec,
        grid=grid,
        weights=coverage(grid),
    )


def network_outputs(state: SolverState) -> np.ndarray:
    return np.stack([neural.unet_forward(state.spec, state.params, z)[0] for z in state.noise])


def objective_terms(chi, phi, kernel, mu, grid, weights, outputs):
    """``(data fidelity, patch penalty)``; the objective is ``fid + mu * pen``."""
    r = _arr(phi) - apply_kernel(_arr(chi), _kern(kernel))
    diff = extract(chi, grid) - outputs
    pen = float(np.sum(extract(weights.weight_sq, grid) * diff * diff))
    return float(np.sum(r * r)), pen


def objective(state: SolverState, phi, kernel, mu, outputs=None) -> float:
    if outputs is None:
        outputs = network_outputs(state)
    fid, pen = objective_terms(state.chi, phi, kernel, mu, state.grid, state.weights, outputs)
    return fid + mu * pen


def patch_loss(state: SolverState, chi, outputs=None) -> float:
    """Denoising loss ``sum_p ||W_p (R_p chi - f(z_p))||^2``."""
    if outputs is None:
        outputs = network_outputs(state)
    diff = extract(chi, state.grid) - outputs
    return float(np.sum(state.patch_weight_sq * diff * diff))


def patch_loss_gradient(state: SolverState, chi, index: int):
    """Gradient of the loss of one patch w.r.t. all parameters."""
    target = _arr(chi)[state.grid.slices(index)]
    out, cache = neural.unet_forward(state.spec, state.params, state.noise[index])
    g = 2.0 * state.patch_weight_sq[index] * (out - target)
    return neural.unet_backward(state.spec, state.params, cache, g)


def denoise_step(state: SolverState, chi, epochs: int) -> list:
    """Warm-started Adam fit of the network to the patches of ``chi``.

    Each epoch takes one optimizer step per patch, in grid order.
    """
    targets = extract(chi, state.grid)
    for _ in range(epochs):
        for i, z in enumerate(state.noise):
            out, cache = neural.unet_forward(state.spec, state.params, z)
            g = 2.0 * state.patch_weight_sq[i] * (out - targets[i])
            grads = neural.unet_backward(state.spec, state.params, cache, g)
            neural.adam_step(state.adam, state.params, grads)
    return state.params


def inversion_step(phi, kernel, mu: float, xbar) -> np.ndarray:
    """Exact minimizer of ``||phi - A chi||^2 + mu ||chi - xbar||^2``."""
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    d = _kern(kernel)
    spec = (d * dft3(_arr(phi)) + mu * dft3(_arr(xbar))) / (d * d + mu)
    return np.real(idft3(spec))


@dataclass
class PdipResult:
    chi: np.ndarray
    params: list
    history: list
    state: SolverState


def run(phi, kernel, cfg: PdipConfig, spec: NetworkSpec, params=None, callback=None) -> PdipResult:
    """Alternate denoising and inversion until the relative change of ``chi``
    drops below ``cfg.tol`` or ``cfg.outer_iters`` iterations have run."""
    phi = _arr(phi)
    state = init_state(phi, kernel, cfg, spec, params)
    for k in range(1, cfg.outer_iters + 1):
        denoise_step(state, state.chi, cfg.inner_epochs)
        outputs = network_outputs(state)
        if not np.all(np.isfinite(outputs)):
            raise DivergenceError(f"network outputs became non-finite at outer iteration {k}")
        before =objective(state, phi, kernel, cfg.mu, outputs)
        xbar = aggregate(outputs, state.grid, state.weights)
        chi_new = inversion_step(phi, kernel, cfg.mu, xbar)
        prev_norm = np.linalg.norm(state.chi)
        change = np.linalg.norm(chi_new - state.chi)
        rel = float(change / prev_norm) if prev_norm > 0 else (0.0 if change == 0 else float("inf"))
        state.chi = chi_new
        state.iteration = k
        after = objective(state, phi, kernel, cfg.mu, outputs)
        if not (np.isfinite(after) and np.isfinite(before)):
            raise DivergenceError(f"objective became non-finite at outer iteration {k}")
        state.history.append(IterationRecord(k, after, before, rel))
        log.info("pdip iter %d: objective %.6g (before inversion %.6g), rel change %.3g",
                 k, after, before, rel)
        if callback is not None:
            callback(state)
        if rel < cfg.tol:
            break
    return PdipResult(state.chi, state.params, state.history, state)


def write_history(history, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "objective", "rel_change"])
        for rec in history:
            writer.writerow([rec.iteration, repr(rec.objective), repr(rec.rel_change)])
    return path
