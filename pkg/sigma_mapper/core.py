"""
Core domain types for Sigma Mapper
Rasters, sigma-maps and the seeded random generator shared by every module.

Gaussian sampling uses the Box-Muller transform on uniforms from the numpy PCG64
bit generator: for uniforms u1, u2 in [0, 1),
    r = sqrt(-2 ln(1 - u1)),  z0 = r cos(2 pi u2),  z1 = r sin(2 pi u2)
and the pair (z0, z1) is emitted in that order. PCG64 and the SeedSequence spawn
tree are specified bit-for-bit by numpy, so a seed gives the same stream on every
platform.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionError, ParameterError

ArrayLike = Union[np.ndarray, Sequence]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Raster:
    """Image of real-valued pixels on the [0, 255] scale, shape (height, width, channels)"""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise DimensionError(f"Raster must be HxW, HxWx1 or HxWx3, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionError("Raster dimensions must be positive")
        if not np.isfinite(data).all():
            raise ParameterError("Raster values must be finite")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape[:2]

    def brightness(self) -> np.ndarray:
        """Per-pixel mean over channels"""
        return self.data.mean(axis=2)

    def to_grayscale(self) -> "Raster":
        if self.channels == 1:
            return self
        return Raster(self.brightness())

    def crop(self, top: int, left: int, height: int, width: int) -> "Raster":
        if top < 0 or left < 0 or top + height > self.height or left + width > self.width:
            raise DimensionError(
                f"Crop {height}x{width} at ({top}, {left}) exceeds raster {self.height}x{self.width}"
            )
        return Raster(self.data[top:top + height, left:left + width])

    def __eq__(self, other) -> bool:
        return isinstance(other, Raster) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SigmaMap:
    """Per-pixel noise standard deviations, shape (height, width)"""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionError(f"SigmaMap must be a non-empty 2-D array, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ParameterError("SigmaMap values must be finite")
        if (data < 0).any():
            raise ParameterError("SigmaMap values must be non-negative")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def constant(cls, width: int, height: int, sigma: float) -> "SigmaMap":
        return cls(np.full((height, width), float(sigma)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def mean_variance(self) -> float:
        """sigma_av^2: mean over pixels of sigma^2"""
        return float(np.mean(self.data * self.data))

    def __eq__(self, other) -> bool:
        return isinstance(other, SigmaMap) and np.array_equal(self.data, other.data)

    __hash__ = None


class Prng:
    """Seeded generator confined to one logical thread; use split() for parallel work"""

    def __init__(self, seed: Union[int, np.random.SeedSequence]):
        if isinstance(seed, np.random.SeedSequence):
            self._sequence = seed
            self.seed = int(seed.entropy)
        else:
            if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
                raise ParameterError(f"Seed must be an integer, got {seed!r}")
            if not 0 <= int(seed) < 2 ** 64:
                raise ParameterError(f"Seed must fit in 64 unsigned bits, got {seed}")
            self.seed = int(seed)
            self._sequence = np.random.SeedSequence(self.seed)
        self._generator = np.random.Generator(np.random.PCG64(self._sequence))

    def split(self, n: int) -> List["Prng"]:
        """Derive n independent child generators (deterministic in call order)"""
        return [Prng(child) for child in self._sequence.spawn(n)]

    def child(self, index: int) -> "Prng":
        """Random-access child: the same index always gives the same stream"""
        if index < 0:
            raise ParameterError(f"Child index must be non-negative, got {index}")
        sequence = np.random.SeedSequence(
            entropy=self._sequence.entropy,
            spawn_key=tuple(self._sequence.spawn_key) + (1 << 32, int(index)),
        )
        return Prng(sequence)

    def uniform(self, size=None) -> np.ndarray:
        """Uniform samples in [0, 1)"""
        return self._generator.random(size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)"""
        return self._generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def standard_normal(self, size) -> np.ndarray:
        """Box-Muller standard normals"""
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u = self._generator.random((pairs, 2))
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = radius * np.cos(angle)
        z[:, 1] = radius * np.sin(angle)
        return z.reshape(-1)[:count].reshape(shape)

    def normal(self, mean=0.0, std=1.0, size=None):
        """N(mean, std^2) samples; std may be an array broadcast against size"""
        if size is None:
            return float(mean + std * self.standard_normal(1)[0])
        return mean + std * self.standard_normal(size)


def _check_std(std: float):
    if not math.isfinite(std) or std < 0:
        raise ParameterError(f"Standard deviation must be finite and non-negative, got {std}")


def gaussian_sample(rng: Prng, mean: float, std: float) -> float:
    """Draw one sample from N(mean, std^2); std = 0 returns mean exactly"""
    if not math.isfinite(mean):
        raise ParameterError(f"Mean must be finite, got {mean}")
    _check_std(std)
    z = rng.standard_normal(1)[0]
    if std == 0:
        return float(mean)
    return float(mean + std * z)


def gaussian_samples(rng: Prng, mean: float, std: float, size) -> np.ndarray:
    """Vectorised gaussian_sample"""
    if not math.isfinite(mean):
        raise ParameterError(f"Mean must be finite, got {mean}")
    _check_std(std)
    return mean + std * rng.standard_normal(size)
