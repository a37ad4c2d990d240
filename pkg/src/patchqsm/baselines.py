"""Comparison reconstructions: thresholded k-space division, TV and TGV.

TV and TGV use the Chambolle-Pock primal-dual scheme. The data term
``0.5 ||A chi - phi||^2`` is handled by its exact proximal map, which is
diagonal in k-space: ``prox(v)^ = (v^ + tau d phi^) / (1 + tau d^2)``.
Gradients are forward differences with Neumann boundary (last difference
zero), in voxel units.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .metrics import rmse_pct
from .spectral import DipoleKernel, apply_kernel, dft3, idft3
from .volume import Mask

GRAD_NORM_SQ = 12.0  # bound on ||grad||^2 for 3D forward differences
TGV_NORM_SQ = 24.0  # bound on ||[[grad, -I], [0, E]]||^2


class SolverConfigError(ValueError):
    """Step sizes or weights outside the stable/valid range."""


@dataclass(frozen=True)
class TkdConfig:
    threshold: float = 0.2

    def __post_init__(self):
        if not 0 < self.threshold <= 2.0 / 3.0:
            raise SolverConfigError(f"TKD threshold must be in (0, 2/3], got {self.threshold}")


@dataclass(frozen=True)
class TvConfig:
    lam: float = 1e-3
    iterations: int = 500
    tau: float = 1.0 / math.sqrt(GRAD_NORM_SQ)
    sigma: float = 1.0 / math.sqrt(GRAD_NORM_SQ)

    def __post_init__(self):
        if self.lam <= 0 or self.iterations < 0:
            raise SolverConfigError("TV needs lam > 0 and iterations >= 0")
        if self.tau <= 0 or self.sigma <= 0 or self.tau * self.sigma * GRAD_NORM_SQ > 1 + 1e-12:
            raise SolverConfigError(
                f"unstable steps: tau*sigma*12 = {self.tau * self.sigma * GRAD_NORM_SQ:.4g} > 1")


@dataclass(frozen=True)
class TgvConfig:
    alpha1: float = 1e-3
    alpha0: float | None = None  # defaults to 2 * alpha1
    iterations: int = 500
    tau: float = 1.0 / math.sqrt(TGV_NORM_SQ)
    sigma: float = 1.0 / math.sqrt(TGV_NORM_SQ)

    def __post_init__(self):
        if self.alpha0 is None:
            object.__setattr__(self, "alpha0", 2.0 * self.alpha1)
        if self.alpha1 <= 0 or self.alpha0 <= 0 or self.iterations < 0:
            raise SolverConfigError("TGV needs alpha1, alpha0 > 0 and iterations >= 0")
        if self.tau <= 0 or self.sigma <= 0 or self.tau * self.sigma * TGV_NORM_SQ > 1 + 1e-12:
            raise SolverConfigError(
                f"unstable steps: tau*sigma*24 = {self.tau * self.sigma * TGV_NORM_SQ:.4g} > 1")


def _arr(v):
    return np.asarray(getattr(v, "array", v), dtype=np.float64)


def _kern(kernel):
    return kernel.data if isinstance(kernel, DipoleKernel) else np.asarray(kernel)


# ---------------------------------------------------------------- TKD

def tkd_inverse(d: np.ndarray, threshold: float) -> np.ndarray:
    """``1/d_t`` with ``|d| < t`` replaced by ``t*sign(d)`` (sign(0) = +1) and DC zeroed."""
    sign = np.where(d < 0, -1.0, 1.0)
    dt = np.where(np.abs(d) >= threshold, d, threshold * sign)
    inv = 1.0 / dt
    inv[0, 0, 0] = 0.0
    return inv


def recon_tkd(phi, kernel, cfg: TkdConfig = TkdConfig()) -> np.ndarray:
    return np.real(idft3(tkd_inverse(_kern(kernel), cfg.threshold) * dft3(_arr(phi))))


# ---------------------------------------------------------------- difference operators

def grad3(u: np.ndarray) -> np.ndarray:
    g = np.zeros((3,) + u.shape)
    g[0, :-1] = u[1:] - u[:-1]
    g[1, :, :-1] = u[:, 1:] - u[:, :-1]
    g[2, :, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    return g


def grad3_adjoint(p: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`grad3` (minus the divergence)."""
    out = np.zeros(p.shape[1:])
    px, py, pz = p
    out[:-1] -= px[:-1]
    out[1:] += px[:-1]
    out[:, :-1] -= py[:, :-1]
    out[:, 1:] += py[:, :-1]
    out[:, :, :-1] -= pz[:, :, :-1]
    out[:, :, 1:] += pz[:, :, :-1]
    return out


def sym_grad3(w: np.ndarray) -> np.ndarray:
    """Symmetrized gradient of a vector field, as a full ``(3, 3, ...)`` tensor."""
    g = np.stack([grad3(w[j]) for j in range(3)], axis=1)  # g[i, j] = d_i w_j
    return 0.5 * (g + g.transpose(1, 0, 2, 3, 4))


def sym_grad3_adjoint(q: np.ndarray) -> np.ndarray:
    qs = 0.5 * (q + q.transpose(1, 0, 2, 3, 4))
    return np.stack([grad3_adjoint(qs[:, j]) for j in range(3)])


def _project_ball(p: np.ndarray, radius: float, ncomp_axes) -> np.ndarray:
    norm = np.sqrt(np.sum(p * p, axis=ncomp_axes))
    return p / np.maximum(1.0, norm / radius)


def l21(p: np.ndarray, ncomp_axes=0) -> float:
    return float(np.sum(np.sqrt(np.sum(p * p, axis=ncomp_axes))))


def tv_value(chi) -> float:
    """Isotropic total variation ``||grad chi||_{2,1}``."""
    return l21(grad3(_arr(chi)))


def tgv_value(chi, w, alpha1: float, alpha0: float) -> float:
    """``alpha1 ||grad chi - w|| + alpha0 ||E w||`` for a given vector field ``w``."""
    return alpha1 * l21(grad3(_arr(chi)) - w) + alpha0 * l21(sym_grad3(w), (0, 1))


def data_fidelity(chi, phi, kernel) -> float:
    r = apply_kernel(_arr(chi), _kern(kernel)) - _arr(phi)
    return 0.5 * float(np.sum(r * r))


def tv_objective(chi, phi, kernel, lam: float) -> float:
    return data_fidelity(chi, phi, kernel) + lam * tv_value(chi)


class _DataProx:
    def __init__(self, phi, d, tau):
        self.d = d
        self.rhs = tau * d * dft3(phi)
        self.den = 1.0 + tau * d * d

    def __call__(self, v):
        return np.real(idft3((dft3(v) + self.rhs) / self.den))


# ---------------------------------------------------------------- TV

def recon_tv(phi, kernel, cfg: TvConfig = TvConfig(), history=None) -> np.ndarray:
    """Minimize ``0.5||A chi - phi||^2 + lam ||grad chi||_{2,1}`` starting from zero.

    If ``history`` is a list, ``(iteration, objective)`` pairs are appended
    every 10 iterations (and at the last one).
    """
    phi, d = _arr(phi), _kern(kernel)
    prox = _DataProx(phi, d, cfg.tau)
    chi = np.zeros_like(phi)
    chi_bar = chi.copy()
    p = np.zeros((3,) + phi.shape)
    for it in range(1, cfg.iterations + 1):
        p = _project_ball(p + cfg.sigma * grad3(chi_bar), cfg.lam, 0)
        chi_new = prox(chi - cfg.tau * grad3_adjoint(p))
        chi_bar = 2.0 * chi_new - chi
        chi = chi_new
        if history is not None and (it % 10 == 0 or it == cfg.iterations):
            history.append((it, tv_objective(chi, phi, d, cfg.lam)))
    return chi


# ---------------------------------------------------------------- TGV

def tgv_objective(chi, w, phi, kernel, alpha1, alpha0) -> float:
    return data_fidelity(chi, phi, kernel) + tgv_value(chi, w, alpha1, alpha0)


def recon_tgv(phi, kernel, cfg: TgvConfig = TgvConfig(), history=None, return_w=False):
    """Second-order TGV reconstruction by primal-dual iteration from zero.

    Primal ``(chi, w)``, duals ``p`` on ``grad chi - w`` and ``q`` on ``E w``.
    """
    phi, d = _arr(phi), _kern(kernel)
    prox = _DataProx(phi, d, cfg.tau)
    shape = phi.shape
    chi = np.zeros(shape)
    w = np.zeros((3,) + shape)
    chi_bar, w_bar = chi.copy(), w.copy()
    p = np.zeros((3,) + shape)
    q = np.zeros((3, 3) + shape)
    for it in range(1, cfg.iterations + 1):
        p = _project_ball(p + cfg.sigma * (grad3(chi_bar) - w_bar), cfg.alpha1, 0)
        q = _project_ball(q + cfg.sigma * sym_grad3(w_bar), cfg.alpha0, (0, 1))
        chi_new = prox(chi - cfg.tau * grad3_adjoint(p))
        w_new = w - cfg.tau * (-p + sym_grad3_adjoint(q))
        chi_bar, w_bar = 2.0 * chi_new - chi, 2.0 * w_new - w
        chi, w = chi_new, w_new
        if history is not None and (it % 10 == 0 or it == cfg.iterations):
            history.append((it, tgv_objective(chi, w, phi, d, cfg.alpha1, cfg.alpha0)))
    return (chi, w) if return_w else chi


# ---------------------------------------------------------------- parameter search

def param_search(reconstruct, gt, grid, mask: Mask | None = None):
    """Evaluate ``reconstruct(value)`` over ``grid`` and keep the lowest RMSE.

    Ties go to the smaller parameter. Returns ``(best_value, best_map, table)``
    where ``table`` lists ``(value, rmse)`` in ascending parameter order.
    """
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("parameter grid is empty")
    best = None
    table = []
    for value in grid:
        rec = reconstruct(value)
        err = rmse_pct(rec, gt, mask)
        table.append((value, err))
        if best is None or err < best[1]:
            best = (value, err, rec)
    return best[0], best[2], table


def method_reconstructor(method: str, phi, kernel, **fixed):
    """Callable ``value -> map`` varying each method's main weight.

    tkd varies the threshold, tv ``lam``, tgv ``alpha1`` (``alpha0`` kept at
    twice ``alpha1`` unless fixed).
    """
    if method == "tkd":
        return lambda t: recon_tkd(phi, kernel, TkdConfig(t))
    if method == "tv":
        return lambda lam: recon_tv(phi, kernel, TvConfig(lam=lam, **fixed))
    if method == "tgv":
        return lambda a1: recon_tgv(phi, kernel, TgvConfig(alpha1=a1, **fixed))
    raise ValueError(f"unknown method {method!r}")
