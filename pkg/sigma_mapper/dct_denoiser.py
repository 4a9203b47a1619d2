"""
Sliding-DCT denoiser for Sigma Mapper
Hard thresholding of 8x8 block DCT coefficients with a per-block threshold taken from a sigma-map.
"""

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dctn, idctn

from .baselines import block_starts
from .config import DCT_BLOCK, DENOISE_STEP, DENOISE_THRESHOLD_FACTOR
from .core import Raster, SigmaMap
from .errors import DimensionError, ParameterError

logger = logging.getLogger(__name__)

# Block rows transformed per chunk
_ROWS_PER_CHUNK = 32


@dataclass(frozen=True)
class DenoiseSpec:
    block: int = DCT_BLOCK
    step: int = DENOISE_STEP
    threshold_factor: float = DENOISE_THRESHOLD_FACTOR

    def __post_init__(self):
        if self.step < 1:
            raise ParameterError(f"step must be >= 1, got {self.step}")
        if not self.threshold_factor > 0:
            raise ParameterError("threshold_factor must be positive")

    @classmethod
    def fast(cls) -> "DenoiseSpec":
        return cls(step=4)


def _denoise_channel(channel: np.ndarray, local_sigma: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                     spec: DenoiseSpec) -> np.ndarray:
    b = spec.block
    windows = sliding_window_view(channel, (b, b))
    total = np.zeros(channel.shape)
    weights = np.zeros(channel.shape)
    for first in range(0, len(ys), _ROWS_PER_CHUNK):
        rows = ys[first:first + _ROWS_PER_CHUNK]
        coefficients = dctn(windows[rows][:, xs], axes=(-2, -1), norm="ortho")
        threshold = spec.threshold_factor * local_sigma[first:first + len(rows), :, None, None]
        keep = np.abs(coefficients) >= threshold
        keep[..., 0, 0] = True
        coefficients = np.where(keep, coefficients, 0.0)
        weight = 1.0 / keep.sum(axis=(-2, -1))  # 1 / (1 + retained non-DC)
        blocks = idctn(coefficients, axes=(-2, -1), norm="ortho") * weight[..., None, None]
        for dy in range(b):
            for dx in range(b):
                index = np.ix_(rows + dy, xs + dx)
                total[index] += blocks[:, :, dy, dx]
                weights[index] += weight
    return total / weights


def denoise(noisy: Raster, sigma_map: SigmaMap, spec: DenoiseSpec = DenoiseSpec()) -> Raster:
    """Denoise with a spatially varying threshold threshold_factor * sigma_local

    sigma_local is the mean of the map over each block; colour channels are
    filtered separately with the same map.
    """
    if noisy.shape != sigma_map.shape:
        raise DimensionError(
            f"Map {sigma_map.height}x{sigma_map.width} does not match image {noisy.height}x{noisy.width}"
        )
    b = spec.block
    if noisy.height < b or noisy.width < b:
        raise DimensionError(f"Image {noisy.height}x{noisy.width} is smaller than a {b}x{b} block")
    ys = block_starts(noisy.height, b, spec.step)
    xs = block_starts(noisy.width, b, spec.step)
    local_sigma = sliding_window_view(sigma_map.data, (b, b))[ys][:, xs].mean(axis=(-2, -1))
    logger.debug("Denoising %dx%d with %d blocks per channel", noisy.height, noisy.width, len(ys) * len(xs))
    channels = [_denoise_channel(noisy.data[:, :, c], local_sigma, ys, xs, spec) for c in range(noisy.channels)]
    return Raster(np.stack(channels, axis=2))
