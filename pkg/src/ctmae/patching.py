"""Cube <-> patch-row conversion, random patch masking and lung partitions.

Patch ``k`` of a cube with ``n`` patches per axis sits at grid position
``(k % n, (k // n) % n, k // n**2)``; x varies fastest. Voxels inside a patch
are flattened the same way (local x fastest).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import BadRatio, DimMismatch, ShapeMismatch
from .preprocess import check_side


@dataclass(frozen=True)
class PatchGrid:
    side: int
    patch: int

    def __post_init__(self):
        check_side(self.side, self.patch)

    @property
    def n_per_axis(self) -> int:
        return self.side // self.patch

    @property
    def n_patches(self) -> int:
        return self.n_per_axis ** 3

    @property
    def patch_dim(self) -> int:
        return self.patch ** 3

    def coords(self) -> np.ndarray:
        """Grid coordinates (x, y, z) of every patch, shape [n_patches, 3]."""
        k = np.arange(self.n_patches)
        n = self.n_per_axis
        return np.stack([k % n, (k // n) % n, k // (n * n)], axis=1)


@dataclass(frozen=True)
class MaskSelection:
    masked: Tuple[int, ...]
    visible: Tuple[int, ...]
    ratio: float
    seed: int


@dataclass(frozen=True)
class LungPartition:
    lung: Tuple[int, ...]
    non_lung: Tuple[int, ...]
    threshold: float


def _split_shape(grid: PatchGrid):
    p, n = grid.patch, grid.n_per_axis
    # Fortran-order view: axes are (lx, px, ly, py, lz, pz)
    return (p, n, p, n, p, n)


def patchify(cube: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Rows of ``[n_patches, patch_dim]``; row k is patch k flattened x-fastest."""
    cube = np.asarray(cube)
    if cube.shape != (grid.side,) * 3:
        raise DimMismatch(f"expected a {grid.side}^3 cube, got {cube.shape}")
    blocks = cube.reshape(_split_shape(grid), order="F").transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(grid.patch_dim, grid.n_patches, order="F").T.copy()


def unpatchify(rows: np.ndarray, grid: PatchGrid) -> np.ndarray:
    rows = np.asarray(rows)
    if rows.shape != (grid.n_patches, grid.patch_dim):
        raise ShapeMismatch(
            f"expected rows of shape {(grid.n_patches, grid.patch_dim)}, got {rows.shape}")
    p, n = grid.patch, grid.n_per_axis
    blocks = rows.T.reshape((p, p, p, n, n, n), order="F").transpose(0, 3, 1, 4, 2, 5)
    return blocks.reshape((grid.side,) * 3, order="F").copy()


def fisher_yates(n: int, rng: np.random.Generator) -> np.ndarray:
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def sample_mask(n_patches: int, ratio: float, seed: int) -> MaskSelection:
    """Mask ``floor(ratio * n_patches)`` patches chosen uniformly at random."""
    if not 0 < ratio < 1:
        raise BadRatio(f"mask ratio must lie in (0, 1), got {ratio}")
    if n_patches < 2:
        raise BadRatio(f"need at least 2 patches to mask, got {n_patches}")
    n_masked = int(np.floor(ratio * n_patches))
    perm = fisher_yates(n_patches, np.random.default_rng(seed))
    masked = np.sort(perm[:n_masked])
    visible = np.sort(perm[n_masked:])
    return MaskSelection(tuple(masked.tolist()), tuple(visible.tolist()), float(ratio), int(seed))


def lung_fraction(mask_cube: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Fraction of lung voxels in each patch."""
    rows = patchify(np.asarray(mask_cube) > 0, grid)
    return rows.sum(axis=1) / grid.patch_dim


def lung_partition(mask_cube: np.ndarray, grid: PatchGrid, threshold: float = 0.25) -> LungPartition:
    """Split patch indices by whether at least ``threshold`` of their voxels are lung."""
    if not 0 <= threshold <= 1:
        raise BadRatio(f"threshold must lie in [0, 1], got {threshold}")
    counts = patchify(np.asarray(mask_cube) > 0, grid).sum(axis=1)
    # integer comparison keeps the 25% boundary exact
    is_lung = counts >= threshold * grid.patch_dim
    idx = np.arange(grid.n_patches)
    return LungPartition(tuple(idx[is_lung].tolist()), tuple(idx[~is_lung].tolist()), float(threshold))
