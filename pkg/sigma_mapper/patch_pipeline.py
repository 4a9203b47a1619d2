"""
Training patch pipeline for Sigma Mapper
Fragment selection, dihedral augmentation and minibatch synthesis (half clipped, half not).
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import FRAGMENT_CANDIDATES, FULL_PATCH_SIZE
from .core import Prng, Raster, SigmaMap
from .errors import DegenerateInputError, DimensionError, ParameterError
from .fileio import load_raster, read_raster_size
from .noise_synth import NoiseSpec, apply_noise, sample_mean_variance, sigma_map_from_brightness

logger = logging.getLogger(__name__)

BRIGHTNESS_SOURCES = ("fragment", "cross_image")


@dataclass(frozen=True)
class TrainingSample:
    patch: Raster
    target: SigmaMap
    clipped: bool
    sigma_av_sq: float

    def __post_init__(self):
        if self.patch.shape != self.target.shape:
            raise DimensionError("Patch and target sizes differ")


def read_manifest(path: str) -> List[str]:
    """One image path per line; blank lines and '#' comments skipped; relative paths resolved against the manifest"""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    paths = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            entry = line.strip()
            if not entry or entry.startswith("#"):
                continue
            paths.append(entry if os.path.isabs(entry) else os.path.join(base, entry))
    return paths


def downscale_by_averaging(raster: Raster, factor: int) -> Raster:
    """Average factor x factor regions; noise variance drops factor^2 times"""
    if factor < 1:
        raise ParameterError(f"Downscale factor must be >= 1, got {factor}")
    if factor == 1:
        return raster
    h = raster.height // factor * factor
    w = raster.width // factor * factor
    if h == 0 or w == 0:
        raise DimensionError(f"Raster {raster.height}x{raster.width} is smaller than factor {factor}")
    blocks = raster.data[:h, :w].reshape(h // factor, factor, w // factor, factor, raster.channels)
    return Raster(blocks.mean(axis=(1, 3)))


@dataclass
class Corpus:
    """Training images referenced by path (or held in memory), loaded lazily"""

    paths: List[str] = field(default_factory=list)
    sizes: List[Tuple[int, int]] = field(default_factory=list)  # (width, height) after downscale
    downscale: int = 1
    _cache: Dict[int, Raster] = field(default_factory=dict, repr=False)

    @classmethod
    def from_manifest(cls, path: str, downscale: int = 1) -> "Corpus":
        if downscale < 1:
            raise ParameterError(f"Downscale factor must be >= 1, got {downscale}")
        paths = read_manifest(path)
        sizes = []
        for p in paths:
            width, height, _ = read_raster_size(p)
            sizes.append((width // downscale, height // downscale))
        logger.info("Corpus: %d images from %s", len(paths), path)
        return cls(paths=paths, sizes=sizes, downscale=downscale)

    @classmethod
    def from_rasters(cls, rasters: List[Raster]) -> "Corpus":
        corpus = cls(paths=[f"<memory:{i}>" for i in range(len(rasters))],
                     sizes=[(r.width, r.height) for r in rasters])
        corpus._cache = dict(enumerate(rasters))
        return corpus

    def __len__(self) -> int:
        return len(self.paths)

    def image(self, index: int) -> Raster:
        if index not in self._cache:
            self._cache[index] = downscale_by_averaging(load_raster(self.paths[index]), self.downscale)
        return self._cache[index]

    def validate(self, patch: int):
        if not self.paths:
            raise ParameterError("Corpus is empty")
        small = [p for p, (w, h) in zip(self.paths, self.sizes) if w < patch or h < patch]
        if small:
            raise DimensionError(f"{len(small)} corpus image(s) smaller than {patch}x{patch}, e.g. {small[0]}")


def detail_score(fragment: Raster) -> float:
    """Mean absolute horizontal plus vertical pixel difference"""
    a = fragment.data
    dx = np.abs(np.diff(a, axis=1)).mean() if a.shape[1] > 1 else 0.0
    dy = np.abs(np.diff(a, axis=0)).mean() if a.shape[0] > 1 else 0.0
    return float(dx + dy)


def select_fragment(image: Raster, P: int = FULL_PATCH_SIZE, rng: Prng = None,
                    candidates: int = FRAGMENT_CANDIDATES) -> Raster:
    """Draw `candidates` random PxP crops and keep the most detailed (first wins ties)"""
    if P < 1 or image.height < P or image.width < P:
        raise DimensionError(f"Image {image.height}x{image.width} is smaller than fragment {P}x{P}")
    best, best_score = None, -1.0
    for _ in range(candidates):
        top = int(rng.integers(0, image.height - P + 1))
        left = int(rng.integers(0, image.width - P + 1))
        crop = image.crop(top, left, P, P)
        score = detail_score(crop)
        if score > best_score:
            best, best_score = crop, score
    return best


def dihedral_transform(fragment: Raster, k: int) -> Raster:
    """k in 0..3: rotation by k*90 degrees; k in 4..7: the same followed by a left-right mirror"""
    if fragment.height != fragment.width:
        raise DimensionError(f"Dihedral transforms need a square fragment, got {fragment.height}x{fragment.width}")
    if not 0 <= k < 8:
        raise ParameterError(f"Transform index must be in 0..7, got {k}")
    data = np.rot90(fragment.data, k % 4, axes=(0, 1))
    if k >= 4:
        data = data[:, ::-1]
    return Raster(data)


def augment(fragment: Raster, rng: Prng) -> Raster:
    """Apply one of the 8 dihedral transforms chosen uniformly"""
    if fragment.height != fragment.width:
        raise DimensionError(f"Augmentation needs a square fragment, got {fragment.height}x{fragment.width}")
    return dihedral_transform(fragment, int(rng.integers(0, 8)))


def _fragment(corpus: Corpus, P: int, rng: Prng, channels: Optional[int]) -> Raster:
    image = corpus.image(int(rng.integers(0, len(corpus))))
    if channels == 1:
        image = image.to_grayscale()
    fragment = augment(select_fragment(image, P, rng), rng)
    if channels == 3 and fragment.channels == 1:
        fragment = Raster(np.repeat(fragment.data, 3, axis=2))
    return fragment


def make_sample(corpus: Corpus, P: int, spec: NoiseSpec, rng: Prng, clipped: bool,
                brightness_source: str = "fragment", channels: Optional[int] = None) -> TrainingSample:
    """One (noisy patch, target map) pair"""
    fragment = _fragment(corpus, P, rng, channels)
    if brightness_source == "cross_image":
        brightness = _fragment(corpus, P, rng, None).brightness()
    else:
        brightness = fragment.brightness()
    sigma_av_sq = sample_mean_variance(rng, spec.R)
    try:
        target = sigma_map_from_brightness(brightness, sigma_av_sq)
    except DegenerateInputError:
        # black fragment: fall back to a constant map with the drawn mean variance
        logger.debug("Black fragment; using a constant map")
        target = sigma_map_from_brightness(np.ones_like(brightness), sigma_av_sq)
    noise_spec = NoiseSpec(R=spec.R, clip=clipped, color_shared_map=spec.color_shared_map)
    patch = apply_noise(fragment, target, noise_spec, rng)
    return TrainingSample(patch=patch, target=target, clipped=clipped, sigma_av_sq=sigma_av_sq)


def make_minibatch(corpus: Corpus, batch: int, P: int, spec: NoiseSpec, rng: Prng,
                   half_clipped: bool = True, brightness_source: str = "fragment",
                   channels: Optional[int] = None) -> List[TrainingSample]:
    """Assemble a minibatch; with half_clipped exactly batch/2 samples are clipped

    Each sample uses its own child generator so results do not depend on
    evaluation order.
    """
    if len(corpus) == 0:
        raise ParameterError("Corpus is empty")
    if batch < 1:
        raise ParameterError(f"Batch size must be positive, got {batch}")
    if half_clipped and (batch < 2 or batch % 2):
        raise ParameterError(f"Half-clipped minibatches need an even batch >= 2, got {batch}")
    if brightness_source not in BRIGHTNESS_SOURCES:
        raise ParameterError(f"brightness_source must be one of {BRIGHTNESS_SOURCES}")

    if half_clipped:
        flags = np.zeros(batch, dtype=bool)
        flags[rng.permutation(batch)[: batch // 2]] = True
    else:
        flags = np.full(batch, spec.clip)
    children = rng.split(batch)
    return [
        make_sample(corpus, P, spec, child, bool(flag), brightness_source, channels)
        for child, flag in zip(children, flags)
    ]
