"""Ground-truth density maps: Gaussian superposition, block-sum downsampling
and count-by-integration.

A density map is a nonnegative float32 image whose total sum is the (possibly
fractional) object count. Rendering accumulates in float64 and casts once at
the end; counting always sums in float64.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GaussianKernel:
    """Normalized isotropic Gaussian stamp of size (2*half_width+1)^2.

    values sums to 1 (float64); normalizer is the constant the raw
    exponentials were multiplied by to achieve that.
    """

    sigma: float
    half_width: int
    values: np.ndarray
    normalizer: float


def gaussian_kernel(sigma: float, half_width: int = 10) -> GaussianKernel:
    """Discrete Gaussian normalized so its entries sum to exactly 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if half_width < 1:
        raise ValueError(f"half_width must be >= 1, got {half_width}")
    n = np.arange(-half_width, half_width + 1, dtype=np.float64)
    raw = np.exp(-(n[:, None] ** 2 + n[None, :] ** 2) / (2.0 * sigma * sigma))
    normalizer = 1.0 / float(raw.sum())
    values = raw * normalizer
    values.flags.writeable = False
    return GaussianKernel(float(sigma), int(half_width), values, normalizer)


def render_density_map(image_dims, centroids, kernel: GaussianKernel) -> np.ndarray:
    """Superpose one kernel copy per centroid onto an (M, N) canvas.

    Centroids are (x, y) = (column, row) integer pixel positions. Kernel mass
    falling outside the image is truncated, not renormalized, so border
    objects contribute less than 1 to the total.
    """
    rows, cols = int(image_dims[0]), int(image_dims[1])
    canvas = np.zeros((rows, cols), dtype=np.float64)
    k = kernel.half_width
    for x, y in centroids:
        x, y = int(x), int(y)
        if not (0 <= x < cols and 0 <= y < rows):
            raise ValueError(
                f"centroid ({x}, {y}) outside a {rows}x{cols} image"
            )
        r0, r1 = max(0, y - k), min(rows, y + k + 1)
        c0, c1 = max(0, x - k), min(cols, x + k + 1)
        canvas[r0:r1, c0:c1] += kernel.values[
            r0 - y + k : r1 - y + k, c0 - x + k : c1 - x + k
        ]
    return canvas.astype(np.float32)


def downsample_block_sum(density_map: np.ndarray, factors) -> np.ndarray:
    """Sum non-overlapping a x b blocks; preserves the total mass.

    Produces the low-resolution training target for an auxiliary head.
    """
    a, b = int(factors[0]), int(factors[1])
    density_map = np.asarray(density_map)
    if density_map.ndim != 2:
        raise ValueError("density map must be 2D")
    rows, cols = density_map.shape
    if a < 1 or b < 1 or rows % a or cols % b:
        raise ValueError(
            f"map of {rows}x{cols} is not divisible by block factors ({a}, {b})"
        )
    blocks = density_map.reshape(rows // a, a, cols // b, b)
    return blocks.sum(axis=(1, 3), dtype=np.float64).astype(np.float32)


def count_from_density(density_map: np.ndarray) -> float:
    """Object count as the integral (sum) of the density map."""
    return float(np.asarray(density_map).sum(dtype=np.float64))
