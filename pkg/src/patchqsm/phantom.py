"""Synthetic susceptibility phantoms, the analytic sphere field and field noise.

Voxel ``(i, j, k)`` has its center at ``(i*dx, j*dy, k*dz)`` millimeters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import Mask, Volume

NOISE_GENERATOR = "numpy.random.PCG64"


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    chi: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"sphere radius must be positive, got {self.radius}")

    def contains(self, x, y, z):
        cx, cy, cz = self.center
        return (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= self.radius**2


@dataclass(frozen=True)
class Cuboid:
    corner: tuple[float, float, float]
    size: tuple[float, float, float]
    chi: float

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError(f"cuboid sizes must be positive, got {self.size}")

    def contains(self, x, y, z):
        inside = np.ones(np.broadcast(x, y, z).shape, dtype=bool)
        for coord, lo, extent in zip((x, y, z), self.corner, self.size):
            inside &= (coord >= lo) & (coord <= lo + extent)
        return inside


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shapes: tuple = ()
    background: float = 0.0
    # mask = voxel centers within this distance (mm) of the grid center; None = whole grid
    mask_radius: float | None = None


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be non-negative, got {self.sigma}")


def voxel_centers(dims, spacing):
    axes = [np.arange(n) * s for n, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def grid_center(dims, spacing):
    return tuple((n - 1) * s / 2.0 for n, s in zip(dims, spacing))


def rasterize(spec: PhantomSpec) -> Volume:
    """Paint shapes in list order; later shapes overwrite earlier ones."""
    x, y, z = voxel_centers(spec.dims, spec.spacing)
    out = np.full(tuple(spec.dims), float(spec.background))
    for shape in spec.shapes:
        out[shape.contains(x, y, z)] = shape.chi
    return Volume(out, spec.spacing)


def phantom_mask(spec: PhantomSpec) -> Mask:
    if spec.mask_radius is None:
        return Mask.full(spec.dims)
    x, y, z = voxel_centers(spec.dims, spec.spacing)
    c = grid_center(spec.dims, spec.spacing)
    r2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
    return Mask(r2 <= spec.mask_radius**2)


def analytic_sphere_field(center, radius, chi, point):
    """Field of a uniformly magnetized sphere (B0 along z) at ``point``.

    Outside: ``chi/3 * (R/r)^3 * (3 cos^2(theta) - 1)``; inside: 0
    (Lorentz-sphere corrected). ``point`` may be a stacked array of
    coordinates with the xyz axis first.
    """
    offset = [np.asarray(p, dtype=np.float64) - c for p, c in zip(point, center)]
    r2 = offset[0] ** 2 + offset[1] ** 2 + offset[2] ** 2
    if np.any(r2 == 0):
        raise ValueError("field is undefined at the sphere center")
    r = np.sqrt(r2)
    cos2 = offset[2] ** 2 / r2
    outside = chi / 3.0 * (radius / r) ** 3 * (3.0 * cos2 - 1.0)
    value = np.where(r > radius, outside, 0.0)
    return float(value) if value.ndim == 0 else value


def add_noise(phi, noise: NoiseSpec):
    """Add i.i.d. zero-mean Gaussian noise; deterministic in ``noise.seed``."""
    arr = phi.array if isinstance(phi, Volume) else np.asarray(phi, dtype=np.float64)
    if noise.sigma == 0:
        out = arr.copy()
    else:
        rng = np.random.default_rng(noise.seed)
        out = arr + rng.normal(0.0, noise.sigma, size=arr.shape)
    return phi.with_array(out) if isinstance(phi, Volume) else out


def desk_phantom(dims=(48, 48, 48)) -> PhantomSpec:
    """Two-sphere test object: +0.5 ppm and -0.3 ppm in a zero background."""
    return PhantomSpec(
        dims=tuple(dims),
        shapes=(
            Sphere(center=(17.0, 22.0, 24.0), radius=6.0, chi=0.5),
            Sphere(center=(31.0, 26.0, 23.0), radius=5.0, chi=-0.3),
        ),
    )
