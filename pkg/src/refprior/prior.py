"""Reflection-intensity prior: patch tiling, per-patch intensity, sinusoidal encoding.

A prior map is a ``(P, P)`` float array; its encoding is ``(P, P, dim)``.
Means are taken jointly over pixels and RGB channels.
"""

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError

FREQUENCY_BASE = 10000.0


def _check_pair(t_patch, r_patch):
    t_patch, r_patch = np.asarray(t_patch), np.asarray(r_patch)
    if t_patch.shape != r_patch.shape:
        raise ShapeError(f"T and R shapes differ: {t_patch.shape} vs {r_patch.shape}")
    return t_patch, r_patch


def _check_grid(shape, grid):
    if grid < 1:
        raise ConfigError(f"grid must be >= 1, got {grid}")
    h, w = shape[:2]
    if h % grid or w % grid:
        raise ShapeError(
            f"image of size {h}x{w} cannot be tiled into {grid}x{grid} patches; "
            f"resize it to a multiple of {grid} (e.g. {grid * max(1, round(h / grid))})"
        )


def patch_grid(image, grid):
    """Split an ``(H, W, ...)`` image into a ``grid x grid`` nested list of patches, row-major."""
    image = np.asarray(image)
    _check_grid(image.shape, grid)
    ph, pw = image.shape[0] // grid, image.shape[1] // grid
    return [
        [image[i * ph:(i + 1) * ph, j * pw:(j + 1) * pw] for j in range(grid)]
        for i in range(grid)
    ]


def assemble_patches(patches):
    return np.concatenate([np.concatenate(row, axis=1) for row in patches], axis=0)


def reflection_intensity(t_patch, r_patch):
    """``Mean(R) / (Mean(R) + Mean(T))``; a patch with both means zero scores 0."""
    t_patch, r_patch = _check_pair(t_patch, r_patch)
    mr = float(r_patch.mean())
    mt = float(t_patch.mean())
    total = mr + mt
    if total == 0.0:
        return 0.0
    return mr / total


def legacy_reflection_intensity(t_patch, r_patch):
    """``Mean(R) / Mean(T)``. Diagnostic only: unbounded, undefined for a black T."""
    t_patch, r_patch = _check_pair(t_patch, r_patch)
    mt = float(t_patch.mean())
    if mt == 0.0:
        raise NumericalError("legacy intensity Mean(R)/Mean(T) is infinite: Mean(T) == 0")
    return float(r_patch.mean()) / mt


def patch_means(image, grid):
    """``(grid, grid)`` array of per-patch means over pixels and channels."""
    image = np.asarray(image, dtype=np.float64)
    _check_grid(image.shape, grid)
    h, w = image.shape[:2]
    tiled = image.reshape(grid, h // grid, grid, w // grid, -1)
    return tiled.mean(axis=(1, 3, 4))


def prior_map(t_image, r_image, grid):
    """Per-patch reflection intensity over a ``grid x grid`` tiling."""
    t_image, r_image = _check_pair(t_image, r_image)
    mt = patch_means(t_image, grid)
    mr = patch_means(r_image, grid)
    total = mr + mt
    safe = np.where(total == 0.0, 1.0, total)
    return np.where(total == 0.0, 0.0, mr / safe)


def encode_prior(prior, dim=64):
    """Sinusoidal features: ``out[..., 2i] = sin(p / 10000**(2i/dim))``, ``out[..., 2i+1] = cos(...)``.

    Works elementwise on any array of priors, appending a trailing ``dim`` axis.
    """
    if dim < 2 or dim % 2:
        raise ConfigError(f"prior encoding dim must be a positive even number, got {dim}")
    prior = np.asarray(prior, dtype=np.float64)
    if not np.all(np.isfinite(prior)):
        raise NumericalError("prior map contains non-finite values")
    i = np.arange(dim // 2)
    divisors = FREQUENCY_BASE ** (2.0 * i / dim)
    angles = prior[..., None] / divisors
    out = np.empty(prior.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def heatmap_bytes(prior, height, width):
    """8-bit heatmap: ``round(p * 255)`` replicated over each patch block."""
    prior = np.asarray(prior, dtype=np.float64)
    grid = prior.shape[0]
    if height % grid or width % grid:
        raise ShapeError(f"heatmap size {height}x{width} not divisible by grid {grid}")
    values = np.floor(np.clip(prior, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return np.repeat(np.repeat(values, height // grid, axis=0), width // grid, axis=1)
