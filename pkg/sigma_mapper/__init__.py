"""Sigma Mapper Library
Simulation, estimation and evaluation of pixel-wise non-stationary Gaussian image noise.
"""

__version__ = "1.0.0"

from .config import Config
from .core import Prng, Raster, SigmaMap
from .errors import SigmaMapperError
from .lab import NoiseLab

__all__ = ["Config", "NoiseLab", "Prng", "Raster", "SigmaMap", "SigmaMapperError", "__version__"]
