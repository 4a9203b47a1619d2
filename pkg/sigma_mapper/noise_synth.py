"""
Noise synthesis for Sigma Mapper
Ground-truth sigma-maps and pixel-wise non-stationary Gaussian noise.

Training maps follow the brightness of an image fragment,
    sigma_ij = sqrt(sigma_av^2 * B_ij / mean(B)),
with sigma_av^2 drawn from a half-normal |N(0, R^2)|. Test maps come from three
parametric shapes rescaled to a requested sigma_av.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from .config import HALF_NORMAL_SCALE, TEST_MAP_FLOOR, TEST_MAP_MODELS
from .core import Prng, Raster, SigmaMap
from .errors import DegenerateInputError, DimensionError, ParameterError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSpec:
    """How noise is drawn: half-normal scale R, clipping, colour handling"""

    R: float = HALF_NORMAL_SCALE
    clip: bool = False
    # True: every channel gets its own draw from the shared map.
    # False: one draw per pixel added to all channels (achromatic noise).
    color_shared_map: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.R) and self.R > 0):
            raise ParameterError(f"NoiseSpec.R must be finite and positive, got {self.R}")


@dataclass(frozen=True)
class TestMapModel:
    """Parametric smooth map shape used for the test suites"""

    __test__ = False  # not a pytest class

    model_id: str
    center: Tuple[float, float] = (0.5, 0.5)   # (x, y) as fractions of width/height
    spread: float = 0.3                        # peak width as a fraction of the image diagonal
    slope: Tuple[float, float] = (1.0, 0.5)    # ramp gradient per image width/height
    frequency: Tuple[float, float] = (1.5, 1.0)  # cycles across width/height
    phase: float = 0.0
    amplitude: float = 0.8                     # sinusoid amplitude relative to its offset
    floor: float = TEST_MAP_FLOOR
    jitter: float = 0.0                        # random perturbation of centre/slope/phase

    def __post_init__(self):
        if self.model_id not in TEST_MAP_MODELS:
            raise ParameterError(f"Unknown test map model {self.model_id!r}")
        if not 0 < self.floor < 1:
            raise ParameterError("floor must be in (0, 1)")
        if self.spread <= 0:
            raise ParameterError("spread must be positive")


def sample_mean_variance(rng: Prng, R: float = HALF_NORMAL_SCALE) -> float:
    """Draw sigma_av^2 = |N(0, R^2)| (variance units)"""
    return float(sample_mean_variances(rng, R, 1)[0])


def sample_mean_variances(rng: Prng, R: float, size: int) -> np.ndarray:
    if not (math.isfinite(R) and R > 0):
        raise ParameterError(f"R must be finite and positive, got {R}")
    return np.abs(R * rng.standard_normal(size))


def sigma_map_from_brightness(brightness: Union[np.ndarray, SigmaMap], sigma_av_sq: float) -> SigmaMap:
    """Scale a brightness matrix into a sigma-map whose mean variance is sigma_av_sq"""
    b = brightness.data if isinstance(brightness, SigmaMap) else np.asarray(brightness, dtype=np.float64)
    if b.ndim != 2:
        raise DimensionError(f"Brightness must be 2-D, got shape {b.shape}")
    if not math.isfinite(sigma_av_sq) or sigma_av_sq < 0:
        raise ParameterError(f"sigma_av_sq must be finite and non-negative, got {sigma_av_sq}")
    if (b < 0).any() or not np.isfinite(b).all():
        raise ParameterError("Brightness values must be finite and non-negative")
    b_mean = float(b.mean())
    if b_mean <= 0:
        raise DegenerateInputError("Brightness is zero everywhere; the sigma-map is undefined")
    return SigmaMap(np.sqrt(sigma_av_sq * (b / b_mean)))


def apply_noise(clean: Raster, sigma_map: SigmaMap, spec: NoiseSpec, rng: Prng) -> Raster:
    """Add N(0, sigma_ij^2) noise per pixel; clamp to [0, 255] when spec.clip"""
    if clean.shape != sigma_map.shape:
        raise DimensionError(
            f"Map {sigma_map.height}x{sigma_map.width} does not match raster {clean.height}x{clean.width}"
        )
    sigma = sigma_map.data[:, :, None]
    if clean.channels == 3 and not spec.color_shared_map:
        z = rng.standard_normal((clean.height, clean.width, 1))
    else:
        z = rng.standard_normal(clean.data.shape)
    noisy = clean.data + sigma * z
    if spec.clip:
        noisy = np.clip(noisy, 0.0, 255.0)
    return Raster(noisy)


def awgn_map(width: int, height: int, sigma: float) -> SigmaMap:
    """Constant map: the i.i.d. AWGN special case"""
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    return SigmaMap.constant(width, height, sigma)


def _grid(width: int, height: int):
    if width < 1 or height < 1:
        raise DimensionError(f"Map dimensions must be positive, got {width}x{height}")
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    return x, y


def generate_test_map(model: TestMapModel, width: int, height: int, rng: Prng) -> SigmaMap:
    """Smooth strictly-positive map of the requested shape (unit-scale; see scale_map_to_target)"""
    x, y = _grid(width, height)
    # Pixel coordinates so a centred peak lands exactly on the middle pixel
    cx = model.center[0] * (width - 1)
    cy = model.center[1] * (height - 1)
    slope_x, slope_y = model.slope
    phase = model.phase
    if model.jitter > 0:
        cx += model.jitter * (rng.uniform() - 0.5) * width
        cy += model.jitter * (rng.uniform() - 0.5) * height
        angle = model.jitter * np.pi * (2 * rng.uniform() - 1)
        slope_x, slope_y = (slope_x * math.cos(angle) - slope_y * math.sin(angle),
                            slope_x * math.sin(angle) + slope_y * math.cos(angle))
        phase += model.jitter * 2 * np.pi * rng.uniform()

    if model.model_id == "gaussian_peak":
        s = model.spread * math.hypot(width, height)
        g = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
        values = model.floor + (1 - model.floor) * g
    elif model.model_id == "linear_ramp":
        u = x / max(width - 1, 1) - 0.5
        v = y / max(height - 1, 1) - 0.5
        ramp = 1.0 + slope_x * u + slope_y * v
        values = np.maximum(ramp, model.floor * ramp.max())
    else:
        amplitude = min(model.amplitude, 1.0 - model.floor)  # offset 1 >= amplitude
        u = x / width
        v = y / height
        values = 1.0 + amplitude * np.sin(2 * np.pi * (model.frequency[0] * u + model.frequency[1] * v) + phase)
    return SigmaMap(values)


def scale_map_to_target(sigma_map: SigmaMap, sigma_av_target: float) -> SigmaMap:
    """Multiply the map by c so that mean(sigma^2) == sigma_av_target^2"""
    if not math.isfinite(sigma_av_target) or sigma_av_target < 0:
        raise ParameterError(f"Target sigma_av must be finite and non-negative, got {sigma_av_target}")
    mean_sq = sigma_map.mean_variance()
    if mean_sq <= 0:
        raise DegenerateInputError("Cannot rescale an all-zero sigma-map")
    c = sigma_av_target / math.sqrt(mean_sq)
    logger.debug("Scaling map by %.6g to sigma_av %.6g", c, sigma_av_target)
    return SigmaMap(c * sigma_map.data)
