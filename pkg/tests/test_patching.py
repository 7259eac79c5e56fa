import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctmae import errors
from ctmae.patching import PatchGrid, lung_partition, patchify, sample_mask, unpatchify


def _patchify_oracle(cube, grid):
    """Triple-loop enumeration: patches x-fastest, voxels inside a patch x-fastest."""
    p, n = grid.patch, grid.n_per_axis
    rows = []
    for pz in range(n):
        for py in range(n):
            for px in range(n):
                row = []
                for lz in range(p):
                    for ly in range(p):
                        for lx in range(p):
                            row.append(cube[px * p + lx, py * p + ly, pz * p + lz])
                rows.append(row)
    return np.array(rows)


def test_full_scale_geometry():
    g = PatchGrid(128, 16)
    assert (g.n_patches, g.patch_dim, g.n_per_axis) == (512, 4096, 8)
    assert PatchGrid(128, 8).n_patches == 4096


def test_side2_patch1_index_order():
    x, y, z = np.indices((2, 2, 2))
    cube = x + 2 * y + 4 * z
    rows = patchify(cube, PatchGrid(2, 1))
    assert rows[:, 0].tolist() == list(range(8))


@pytest.mark.parametrize("side,patch", [(4, 2), (6, 3), (8, 4), (8, 2)])
def test_patchify_matches_oracle(rng, side, patch):
    g = PatchGrid(side, patch)
    cube = rng.normal(size=(side,) * 3)
    assert np.array_equal(patchify(cube, g), _patchify_oracle(cube, g))


def test_round_trip_32(rng):
    g = PatchGrid(32, 8)
    cube = rng.normal(size=(32, 32, 32)).astype(np.float32)
    back = unpatchify(patchify(cube, g), g)
    assert back.tobytes() == cube.tobytes()
    assert not unpatchify(np.zeros((64, 512)), g).any()


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([(4, 1), (4, 2), (8, 4), (16, 8), (12, 4)]), st.integers(0, 2**32 - 1))
def test_round_trip_property(geom, seed):
    g = PatchGrid(*geom)
    cube = np.random.default_rng(seed).normal(size=(g.side,) * 3)
    assert np.array_equal(unpatchify(patchify(cube, g), g), cube)


def test_shape_errors():
    g = PatchGrid(8, 4)
    with pytest.raises(errors.ShapeMismatch):
        unpatchify(np.zeros((7, 64)), g)
    with pytest.raises(errors.DimMismatch):
        patchify(np.zeros((8, 8, 4)), g)
    with pytest.raises(errors.IndivisibleSide):
        PatchGrid(10, 4)


def test_coords_agree_with_order():
    g = PatchGrid(12, 4)
    cube = np.zeros((12, 12, 12))
    for k, (x, y, z) in enumerate(g.coords()):
        cube[x * 4:(x + 1) * 4, y * 4:(y + 1) * 4, z * 4:(z + 1) * 4] = k
    assert np.array_equal(patchify(cube, g)[:, 0], np.arange(g.n_patches))


def test_mask_counts():
    s = sample_mask(512, 0.75, 7)
    assert (len(s.masked), len(s.visible)) == (384, 128)
    assert len(sample_mask(4096, 0.75, 7).masked) == 3072
    assert s == sample_mask(512, 0.75, 7)
    assert sample_mask(10, 0.75, 0).masked.__len__() == 7  # floor(7.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 300), st.floats(0.01, 0.99), st.integers(0, 2**63 - 1))
def test_mask_partition_property(n, ratio, seed):
    s = sample_mask(n, ratio, seed)
    assert len(s.masked) == int(np.floor(ratio * n))
    assert sorted(s.masked + s.visible) == list(range(n))
    assert list(s.masked) == sorted(s.masked) and list(s.visible) == sorted(s.visible)


def test_bad_ratio():
    for r in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(errors.BadRatio):
            sample_mask(10, r, 0)
    with pytest.raises(errors.BadRatio):
        sample_mask(1, 0.5, 0)


def test_mask_frequency_binomial():
    n, ratio, trials = 64, 0.75, 10_000
    hits = np.zeros(n)
    for seed in range(trials):
        hits[list(sample_mask(n, ratio, seed).masked)] += 1
    p = np.floor(ratio * n) / n
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(hits - trials * p) <= 3 * sigma)


def test_lung_boundary_inclusive():
    g = PatchGrid(32, 16)
    mask = np.zeros((32, 32, 32), np.uint8)
    mask[:16, :16, :4] = 1  # exactly 1024 of 4096 voxels in patch 0
    part = lung_partition(mask, g, 0.25)
    assert part.lung == (0,)
    mask[0, 0, 0] = 0
    assert lung_partition(mask, g, 0.25).lung == ()


def test_lung_extremes():
    g = PatchGrid(16, 8)
    empty = lung_partition(np.zeros((16,) * 3), g)
    assert empty.lung == () and empty.non_lung == tuple(range(8))
    assert lung_partition(np.ones((16,) * 3), g).lung == tuple(range(8))
    assert lung_partition(np.zeros((16,) * 3), g, 0.0).lung == tuple(range(8))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_lung_partition_monotone(seed, t1, t2):
    g = PatchGrid(8, 4)
    mask = np.random.default_rng(seed).random((8, 8, 8)) < 0.4
    lo, hi = sorted((t1, t2))
    a, b = lung_partition(mask, g, lo), lung_partition(mask, g, hi)
    assert set(b.lung) <= set(a.lung)
    assert sorted(a.lung + a.non_lung) == list(range(8))
