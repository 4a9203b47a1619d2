"""
Classical baselines for Sigma Mapper
Local block-DCT robust sigma-map estimator and the global STD extractor.

The local estimator takes, for every 8x8 block on a `step` grid, the
high-frequency DCT coefficients (index sum u + v >= 8), and estimates
    sigma = 1.4826 * median(|c|)
which is consistent for Gaussian coefficients. With pool > 0 the median runs over
the coefficients of the (2*pool+1)^2 neighbouring blocks. Each pixel then receives
the mean estimate of all blocks covering it. Texture leaks into high frequencies,
so the estimate is biased upwards on detailed content.
"""

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dctn, idctn

from .config import DCT_BLOCK, DCT_POOL, DCT_STEP, MAD_TO_SIGMA
from .core import Raster, SigmaMap
from .errors import DimensionError, ParameterError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DctBlockSpec:
    block: int = DCT_BLOCK
    step: int = DCT_STEP
    pool: int = DCT_POOL

    def __post_init__(self):
        if self.block < 2:
            raise ParameterError("block must be at least 2")
        if not 1 <= self.step <= self.block:
            raise ParameterError(f"step must be in [1, {self.block}], got {self.step}")
        if self.pool < 0:
            raise ParameterError("pool must be non-negative")

    @property
    def high_freq_mask(self) -> np.ndarray:
        u, v = np.indices((self.block, self.block))
        return (u + v) >= self.block


def _check_block(block: np.ndarray, size: int = DCT_BLOCK) -> np.ndarray:
    block = np.asarray(block, dtype=np.float64)
    if block.shape != (size, size):
        raise DimensionError(f"Expected a {size}x{size} block, got {block.shape}")
    return block


def dct2_forward(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II of an 8x8 block"""
    return dctn(_check_block(block), norm="ortho")


def dct2_inverse(coefficients: np.ndarray) -> np.ndarray:
    return idctn(_check_block(coefficients), norm="ortho")


def block_starts(size: int, block: int, step: int) -> np.ndarray:
    """Block origins on the step grid, with the last block flush to the border"""
    starts = list(range(0, size - block + 1, step))
    if starts[-1] != size - block:
        starts.append(size - block)
    return np.asarray(starts)


def _scatter_blocks(values: np.ndarray, ys: np.ndarray, xs: np.ndarray, block: int, shape) -> np.ndarray:
    """Per-pixel mean of the per-block values of every block covering the pixel"""
    total = np.zeros(shape)
    count = np.zeros(shape)
    rows, cols = np.meshgrid(ys, xs, indexing="ij")
    for dy in range(block):
        for dx in range(block):
            np.add.at(total, (rows + dy, cols + dx), values)
            np.add.at(count, (rows + dy, cols + dx), 1.0)
    return total / count


def _pooled_median(magnitudes: np.ndarray, pool: int) -> np.ndarray:
    """Median over the coefficients of each block's (2*pool+1)^2 block neighbourhood"""
    if pool == 0:
        return np.median(magnitudes, axis=-1)
    padded = np.pad(magnitudes, ((pool, pool), (pool, pool), (0, 0)), mode="edge")
    width = 2 * pool + 1
    out = np.empty(magnitudes.shape[:2])
    for row in range(magnitudes.shape[0]):
        windows = sliding_window_view(padded[row:row + width], width, axis=1)  # (width, nx, K, width)
        pooled = windows.transpose(1, 0, 2, 3).reshape(magnitudes.shape[1], -1)
        out[row] = np.median(pooled, axis=1)
    return out


def _channel_estimate(channel: np.ndarray, spec: DctBlockSpec) -> np.ndarray:
    ys = block_starts(channel.shape[0], spec.block, spec.step)
    xs = block_starts(channel.shape[1], spec.block, spec.step)
    windows = sliding_window_view(channel, (spec.block, spec.block))
    blocks = windows[ys][:, xs]  # (ny, nx, block, block)
    coefficients = dctn(blocks, axes=(-2, -1), norm="ortho")
    magnitudes = np.abs(coefficients[..., spec.high_freq_mask])  # (ny, nx, K)
    sigma = MAD_TO_SIGMA * _pooled_median(magnitudes, spec.pool)
    return _scatter_blocks(sigma, ys, xs, spec.block, channel.shape)


def local_dct_estimate(image: Raster, spec: DctBlockSpec = DctBlockSpec()) -> SigmaMap:
    """Per-pixel sigma-map from robust high-frequency DCT statistics; colour channels averaged"""
    if image.height < spec.block or image.width < spec.block:
        raise DimensionError(f"Image {image.height}x{image.width} is smaller than a {spec.block}x{spec.block} block")
    maps = [_channel_estimate(image.data[:, :, c], spec) for c in range(image.channels)]
    return SigmaMap(np.mean(maps, axis=0))


def global_std_from_map(sigma_map: SigmaMap) -> float:
    """Global noise STD as the median of all map values"""
    if sigma_map.data.size == 0:
        raise DimensionError("Empty sigma-map")
    return float(np.median(sigma_map.data))
