import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from refprior.errors import ConfigError, NumericalError, ShapeError
from refprior.prior import (
    assemble_patches,
    encode_prior,
    heatmap_bytes,
    legacy_reflection_intensity,
    patch_grid,
    prior_map,
    reflection_intensity,
)

unit = st.floats(0.0, 1.0, allow_nan=False)
patches = arrays(np.float64, (4, 4, 3), elements=unit)


def brute_force_map(t, r, grid):
    ph, pw = t.shape[0] // grid, t.shape[1] // grid
    out = np.zeros((grid, grid))
    for i in range(grid):
        for j in range(grid):
            tp = t[i * ph:(i + 1) * ph, j * pw:(j + 1) * pw]
            rp = r[i * ph:(i + 1) * ph, j * pw:(j + 1) * pw]
            mt = sum(float(v) for v in tp.ravel()) / tp.size
            mr = sum(float(v) for v in rp.ravel()) / rp.size
            out[i, j] = 0.0 if mt + mr == 0 else mr / (mr + mt)
    return out


# ------------------------------------------------------------- patch tiling
def test_single_patch_is_whole_image(rng):
    img = rng.uniform(size=(6, 6, 3))
    grid = patch_grid(img, 1)
    np.testing.assert_array_equal(grid[0][0], img)


def test_seven_by_seven_tiling(rng):
    img = rng.uniform(size=(56, 56, 3))
    grid = patch_grid(img, 7)
    assert len(grid) == 7 and all(len(row) == 7 for row in grid)
    assert all(p.shape == (8, 8, 3) for row in grid for p in row)
    np.testing.assert_array_equal(grid[2][5], img[16:24, 40:48])
    np.testing.assert_array_equal(assemble_patches(grid), img)


def test_indivisible_image_asks_for_resize():
    with pytest.raises(ShapeError, match="resize"):
        patch_grid(np.zeros((50, 56, 3)), 7)


# ---------------------------------------------------------------- intensity
def test_intensity_cases():
    t = np.full((4, 4, 3), 0.4)
    assert reflection_intensity(t, np.zeros_like(t)) == 0.0
    assert reflection_intensity(t, t.copy()) == 0.5
    assert reflection_intensity(np.zeros_like(t), t) == 1.0
    assert reflection_intensity(np.zeros_like(t), np.zeros_like(t)) == 0.0


def test_intensity_shape_mismatch():
    with pytest.raises(ShapeError):
        reflection_intensity(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_legacy_intensity():
    t = np.full((2, 2, 3), 0.3)
    assert legacy_reflection_intensity(t, t.copy()) == 1.0
    assert legacy_reflection_intensity(t, np.zeros_like(t)) == 0.0
    with pytest.raises(NumericalError, match="infinite"):
        legacy_reflection_intensity(np.zeros_like(t), t)


@settings(max_examples=100, deadline=None)
@given(patches, patches)
def test_complement_sums_to_one(t, r):
    if t.mean() + r.mean() > 0:
        assert abs(reflection_intensity(t, r) + reflection_intensity(r, t) - 1.0) < 1e-12


@settings(max_examples=100, deadline=None)
@given(patches, patches, st.floats(0.01, 100.0))
def test_scale_invariance_and_range(t, r, c):
    p = reflection_intensity(t, r)
    assert 0.0 <= p <= 1.0
    assert reflection_intensity(t * c, r * c) == pytest.approx(p, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(patches, patches, arrays(np.float64, (4, 4, 3), elements=st.floats(0.0, 0.5)))
def test_monotone_in_reflection(t, r, extra):
    a = prior_map(t, r, 2)
    b = prior_map(t, r + extra, 2)
    assert np.all(b >= a - 1e-15)


# --------------------------------------------------------------------- maps
def test_single_grid_equals_whole_image(rng):
    t, r = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    assert prior_map(t, r, 1)[0, 0] == pytest.approx(reflection_intensity(t, r), abs=1e-15)


def test_left_right_split():
    t = np.full((4, 4, 3), 0.5)
    r = np.zeros((4, 4, 3))
    r[:, :2] = 0.5
    np.testing.assert_array_equal(prior_map(t, r, 2), [[0.5, 0.0], [0.5, 0.0]])


@pytest.mark.parametrize("grid", [1, 7, 14, 28])
def test_map_matches_brute_force(rng, grid):
    for _ in range(5):
        t, r = rng.uniform(size=(56, 56, 3)), rng.uniform(size=(56, 56, 3)) * rng.uniform()
        assert np.abs(prior_map(t, r, grid) - brute_force_map(t, r, grid)).max() < 1e-12


# ----------------------------------------------------------------- encoding
def test_encode_zero():
    e = encode_prior(np.zeros((2, 2)))
    assert e.shape == (2, 2, 64)
    np.testing.assert_array_equal(e[..., 0::2], 0.0)
    np.testing.assert_array_equal(e[..., 1::2], 1.0)


def test_encode_half_first_frequency():
    e = encode_prior(np.array([[0.5]]))
    assert e[0, 0, 0] == pytest.approx(0.479426, abs=1e-6)
    assert e[0, 0, 1] == pytest.approx(0.877583, abs=1e-6)


def test_encode_direct_formula(rng):
    p = rng.uniform(size=(7, 7))
    e = encode_prior(p, 16)
    for a, b, i in [(0, 3, 0), (4, 1, 5), (6, 6, 7)]:
        angle = p[a, b] / 10000 ** (2 * i / 16)
        assert e[a, b, 2 * i] == pytest.approx(math.sin(angle), abs=1e-12)
        assert e[a, b, 2 * i + 1] == pytest.approx(math.cos(angle), abs=1e-12)


def test_encode_patch_permutation_equivariant(rng):
    p = rng.uniform(size=(3, 3))
    perm = rng.permutation(9)
    flat = encode_prior(p).reshape(9, -1)
    np.testing.assert_array_equal(encode_prior(p.reshape(-1)[perm]), flat[perm])


def test_encode_errors():
    with pytest.raises(ConfigError):
        encode_prior(np.zeros((2, 2)), 63)
    with pytest.raises(NumericalError):
        encode_prior(np.array([[np.nan]]))


def test_heatmap_replicates_rounded_values():
    p = np.array([[0.0, 0.5], [0.2, 1.0]])
    h = heatmap_bytes(p, 4, 6)
    assert h.dtype == np.uint8 and h.shape == (4, 6)
    np.testing.assert_array_equal(h[:2, :3], 0)
    np.testing.assert_array_equal(h[:2, 3:], 128)  # 127.5 rounds half up
    np.testing.assert_array_equal(h[2:, :3], 51)
    np.testing.assert_array_equal(h[2:, 3:], 255)
