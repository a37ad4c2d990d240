"""Discrete Fourier transforms, the dipole kernel and the field operator.

The field operator maps susceptibility to tissue field,
``phi = real(ifft(d * fft(chi)))``, with ``d = 1/3 - kz^2/|k|^2`` and the
DC entry fixed at 0. Because ``d`` is real and even it is self-adjoint.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume


def dft3(a) -> np.ndarray:
    """Unnormalized forward 3D DFT."""
    return np.fft.fftn(np.asarray(a), axes=(0, 1, 2))


def idft3(s) -> np.ndarray:
    """Inverse 3D DFT carrying the 1/N factor."""
    return np.fft.ifftn(np.asarray(s), axes=(0, 1, 2))


def kspace_coordinates(dims, spacing=(1.0, 1.0, 1.0)):
    """Physical frequencies ``n_i / (N_i * spacing_i)`` in FFT order, as an ij-meshgrid."""
    axes = [np.fft.fftfreq(int(n), d=float(s)) for n, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


@dataclass(frozen=True)
class DipoleKernel:
    """Real k-space dipole response in FFT (unshifted) order."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def to_volume(self) -> Volume:
        return Volume(self.data, self.spacing)


def build_dipole_kernel(dims, spacing=(1.0, 1.0, 1.0)) -> DipoleKernel:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise ValueError(f"dipole kernel needs at least 2 samples per axis, got {dims}")
    kx, ky, kz = kspace_coordinates(dims, spacing)
    k2 = kx**2 + ky**2 + kz**2
    k2[0, 0, 0] = 1.0  # placeholder; DC is overwritten below
    d = 1.0 / 3.0 - kz**2 / k2
    d[0, 0, 0] = 0.0
    d.setflags(write=False)
    return DipoleKernel(d, tuple(float(s) for s in spacing))


def _unwrap(v):
    if isinstance(v, Volume):
        return v.array, v
    return np.asarray(v, dtype=np.float64), None


def _kernel_data(kernel):
    return kernel.data if isinstance(kernel, DipoleKernel) else np.asarray(kernel)


def apply_kernel(a: np.ndarray, d: np.ndarray) -> np.ndarray:
    if a.shape != d.shape:
        raise ValueError(f"field dims {a.shape} do not match kernel dims {d.shape}")
    return np.real(idft3(d * dft3(a)))


def forward_field(chi, kernel):
    """Noise-free field of a susceptibility distribution.

    Accepts a :class:`Volume` or a plain array and returns the same kind.
    """
    a, vol = _unwrap(chi)
    out = apply_kernel(a, _kernel_data(kernel))
    return vol.with_array(out) if vol is not None else out


def adjoint_field(y, kernel):
    """Adjoint of :func:`forward_field`; identical since the kernel is real and even."""
    return forward_field(y, kernel)


def forward_imag_residual(chi, kernel) -> float:
    """Norm of the discarded imaginary part relative to the real output."""
    a, _ = _unwrap(chi)
    full = idft3(_kernel_data(kernel) * dft3(a))
    denom = np.linalg.norm(full.real)
    return float(np.linalg.norm(full.imag) / denom) if denom > 0 else float(np.linalg.norm(full.imag))
