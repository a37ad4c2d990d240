"""Patch extraction, coverage weights and weighted overlap-add.

Weights are ``w(v) = 1/sqrt(c(v))`` where ``c(v)`` counts the patches
covering voxel ``v``. Then ``sum_patches w^2 = 1`` at every voxel, so
``aggregate(extract(x)) == x`` and the weighted patch penalty
``sum ||W (R x - b)||^2`` equals ``||x - xbar||^2`` plus a constant.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np


def axis_origins(n: int, p: int, s: int) -> list[int]:
    """Regular origins ``0, s, 2s, ...`` plus one clamped to ``n - p`` if needed."""
    if p > n:
        raise ValueError(f"patch size {p} exceeds volume size {n}")
    if p < 1 or s < 1:
        raise ValueError(f"patch size and stride must be >= 1, got p={p}, s={s}")
    if s > p:
        raise ValueError(f"stride {s} larger than patch size {p} leaves gaps")
    origins = list(range(0, n - p + 1, s))
    if origins[-1] != n - p:
        origins.append(n - p)
    return origins


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected a scalar or three values, got {v!r}")
    return t


@dataclass(frozen=True)
class PatchGrid:
    dims: tuple[int, int, int]
    patch: tuple[int, int, int]
    stride: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...]

    def __len__(self):
        return len(self.origins)

    def slices(self, i: int):
        return tuple(slice(o, o + p) for o, p in zip(self.origins[i], self.patch))


@dataclass(frozen=True)
class WeightField:
    coverage: np.ndarray  # int patch count per voxel
    weight: np.ndarray  # 1/sqrt(coverage)

    @property
    def weight_sq(self) -> np.ndarray:
        return 1.0 / self.coverage


def plan_patches(dims, patch, stride) -> PatchGrid:
    """Patch origins ordered with x fastest, then y, then z."""
    dims, patch, stride = _triple(dims), _triple(patch), _triple(stride)
    per_axis = [axis_origins(n, p, s) for n, p, s in zip(dims, patch, stride)]
    origins = tuple((x, y, z) for z, y, x in product(per_axis[2], per_axis[1], per_axis[0]))
    return PatchGrid(dims, patch, stride, origins)


def extract(chi, grid: PatchGrid) -> np.ndarray:
    """Stack of patches, shape ``(len(grid),) + grid.patch``."""
    arr = np.asarray(getattr(chi, "array", chi), dtype=np.float64)
    if arr.shape != grid.dims:
        raise ValueError(f"volume dims {arr.shape} do not match grid dims {grid.dims}")
    return np.stack([arr[grid.slices(i)] for i in range(len(grid))])


def coverage(grid: PatchGrid) -> WeightField:
    count = np.zeros(grid.dims, dtype=np.int64)
    for i in range(len(grid)):
        count[grid.slices(i)] += 1
    if count.min() < 1:
        raise ValueError("patch grid leaves voxels uncovered")
    return WeightField(count, 1.0 / np.sqrt(count))


def patch_weights(grid: PatchGrid, wf: WeightField) -> np.ndarray:
    """Per-patch copies of ``w``, aligned with :func:`extract` output."""
    return extract(wf.weight, grid)


def aggregate(patches, grid: PatchGrid, wf: WeightField) -> np.ndarray:
    """Weighted overlap-add ``sum_ijk R^T W^2 b_ijk``; sums in patch order."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape != (len(grid),) + grid.patch:
        raise ValueError(
            f"patch stack shape {patches.shape} does not match grid "
            f"({len(grid)} patches of {grid.patch})")
    acc = np.zeros(grid.dims)
    for i in range(len(grid)):
        acc[grid.slices(i)] += patches[i]
    return acc * wf.weight_sq
