"""
Sigma-map estimator for Sigma Mapper
Three-level residual encoder/decoder regressing per-pixel noise STD, trained with MSE and Adam.

Topology, for channel widths (c0, c1, c2) and `blocks` residual blocks per cascade:

    input --head conv--> enc0 (c0) --sconv--> enc1 (c1) --sconv--> enc2 (c2) --sconv--> mid (c2)
    mid --up--> (+enc2) dec2 --up--> (+enc1) dec1 --up--> (+enc0) dec0 --tail conv--> (+skip) softplus

Each stride conv halves the resolution, so a mid-level activation covers 8x8 input
pixels. Each "up" is a 1x1 projection followed by nearest-neighbour doubling (a
transposed conv with tied taps); every conv pads reflectively, so a constant image
yields a constant map. The outermost skip is a 1x1 projection of the input added to the tail
output before the final softplus. Pixels enter the network divided by 255; the
output is in sigma units of the [0, 255] scale.
"""

import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from . import layers
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, CHECKPOINT_EVERY, DEFAULT_BLOCKS,
                     DEFAULT_CHANNELS, DEFAULT_TILE, DESK_BATCH, DESK_ITERATIONS, DESK_LR_STAGE1,
                     DESK_LR_STAGE2, DESK_PATCH_SIZE, LEVELS, LOG_EVERY, FULL_BATCH,
                     FULL_ITERATIONS, FULL_LR_STAGE1, FULL_LR_STAGE2, FULL_PATCH_SIZE,
                     PIXEL_PEAK, STAGE1_FRACTION, TILE_OVERLAP)
from .core import Prng, Raster, SigmaMap
from .errors import DimensionError, NumericalError, ParameterError
from .noise_synth import NoiseSpec
from .patch_pipeline import Corpus, TrainingSample, make_minibatch

logger = logging.getLogger(__name__)

Tensors = Dict[str, np.ndarray]

# Spatial size must be a multiple of this after padding (three stride-2 stages)
SIZE_MULTIPLE = 2 ** LEVELS


@dataclass(frozen=True)
class EstimatorConfig:
    channels: Tuple[int, int, int] = DEFAULT_CHANNELS
    blocks: int = DEFAULT_BLOCKS
    input_channels: int = 1
    levels: int = LEVELS
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.levels != LEVELS:
            raise ParameterError(f"The estimator has exactly {LEVELS} levels, got {self.levels}")
        if len(self.channels) != LEVELS or min(self.channels) <= 0:
            raise ParameterError(f"channels must list {LEVELS} positive widths, got {self.channels}")
        if self.blocks < 0:
            raise ParameterError("blocks must be non-negative")
        if self.input_channels not in (1, 3):
            raise ParameterError("input_channels must be 1 or 3")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ParameterError("Adam betas must be in [0, 1) and epsilon positive")

    def to_dict(self) -> Dict:
        return {"channels": list(self.channels), "blocks": self.blocks,
                "input_channels": self.input_channels, "levels": self.levels,
                "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, values: Dict) -> "EstimatorConfig":
        return cls(**values)


@dataclass(frozen=True)
class TrainSchedule:
    total_iterations: int = DESK_ITERATIONS
    lr_stage1: float = DESK_LR_STAGE1
    lr_stage2: float = DESK_LR_STAGE2
    batch: int = DESK_BATCH
    patch: int = DESK_PATCH_SIZE
    stage1_fraction: float = STAGE1_FRACTION
    checkpoint_every: int = CHECKPOINT_EVERY
    log_every: int = LOG_EVERY

    def __post_init__(self):
        if self.total_iterations < 0:
            raise ParameterError("total_iterations must be non-negative")
        if not (self.lr_stage1 > 0 and self.lr_stage2 > 0):
            raise ParameterError("Learning rates must be positive")
        if self.lr_stage2 >= self.lr_stage1:
            raise ParameterError("lr_stage2 must be smaller than lr_stage1")
        if not 0 < self.stage1_fraction <= 1:
            raise ParameterError("stage1_fraction must be in (0, 1]")
        if self.patch % SIZE_MULTIPLE:
            raise ParameterError(f"Patch size must be a multiple of {SIZE_MULTIPLE}, got {self.patch}")

    @classmethod
    def full(cls) -> "TrainSchedule":
        """150000 iterations of 32 patches of 128x128; 1e-5 then 5e-6"""
        return cls(FULL_ITERATIONS, FULL_LR_STAGE1, FULL_LR_STAGE2, FULL_BATCH, FULL_PATCH_SIZE,
                   checkpoint_every=10000, log_every=500)

    @classmethod
    def desk(cls) -> "TrainSchedule":
        return cls()

    @property
    def stage_boundary(self) -> int:
        return int(round(self.total_iterations * self.stage1_fraction))

    def lr_at(self, iteration: int) -> float:
        """Learning rate for the 0-based iteration"""
        return self.lr_stage1 if iteration < self.stage_boundary else self.lr_stage2


@dataclass
class EstimatorParams:
    """Weights plus Adam moments and the iteration counter"""

    tensors: Tensors
    m: Tensors = field(default_factory=dict)
    v: Tensors = field(default_factory=dict)
    iteration: int = 0

    def __post_init__(self):
        for name, t in self.tensors.items():
            self.m.setdefault(name, np.zeros_like(t))
            self.v.setdefault(name, np.zeros_like(t))

    def copy(self) -> "EstimatorParams":
        return EstimatorParams({k: t.copy() for k, t in self.tensors.items()},
                               {k: t.copy() for k, t in self.m.items()},
                               {k: t.copy() for k, t in self.v.items()}, self.iteration)


def _widths(config: EstimatorConfig) -> List[int]:
    return list(config.channels) + [config.channels[-1]]


def _block_names(prefix: str, config: EstimatorConfig) -> List[str]:
    return [f"{prefix}.block{i}" for i in range(config.blocks)]


def param_shapes(config: EstimatorConfig) -> Dict[str, Tuple[int, ...]]:
    """Every parameter name (level, block, role) with its shape"""
    widths = _widths(config)
    shapes = {"head.w": (widths[0], config.input_channels, 3, 3), "head.b": (widths[0],)}

    def cascade(prefix, c):
        for block in _block_names(prefix, config):
            for conv in ("conv1", "conv2"):
                shapes[f"{block}.{conv}.w"] = (c, c, 3, 3)
                shapes[f"{block}.{conv}.b"] = (c,)

    for level in range(LEVELS):
        cascade(f"enc{level}", widths[level])
        shapes[f"down{level}.w"] = (widths[level + 1], widths[level], 2, 2)
        shapes[f"down{level}.b"] = (widths[level + 1],)
    cascade("mid", widths[LEVELS])
    for level in reversed(range(LEVELS)):
        shapes[f"up{level}.w"] = (widths[level], widths[level + 1], 1, 1)
        shapes[f"up{level}.b"] = (widths[level],)
        cascade(f"dec{level}", widths[level])
    shapes["tail.w"] = (1, widths[0], 3, 3)
    shapes["tail.b"] = (1,)
    shapes["skip.w"] = (1, config.input_channels, 1, 1)
    shapes["skip.b"] = (1,)
    return shapes


def init_params(config: EstimatorConfig, rng: Prng) -> EstimatorParams:
    """Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases"""
    tensors = {}
    for name, shape in sorted(param_shapes(config).items()):
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / math.sqrt(fan_in)
        tensors[name] = (2.0 * rng.uniform(shape) - 1.0) * bound
    return EstimatorParams(tensors)


def _check(x: np.ndarray, layer: str):
    if not np.isfinite(x).all():
        raise NumericalError(f"Non-finite activations in layer {layer}", layer=layer)


def _cascade_forward(p: Tensors, prefix: str, config: EstimatorConfig, x: np.ndarray, cache: Dict):
    for block in _block_names(prefix, config):
        h1, cols1 = layers.conv_forward(x, p[f"{block}.conv1.w"], p[f"{block}.conv1.b"])
        a = layers.relu_forward(h1)
        h2, cols2 = layers.conv_forward(a, p[f"{block}.conv2.w"], p[f"{block}.conv2.b"])
        x = x + h2
        _check(x, block)
        cache[block] = (cols1, h1, cols2)
    return x


def _cascade_backward(p: Tensors, prefix: str, config: EstimatorConfig, dy: np.ndarray,
                      cache: Dict, grads: Tensors):
    for block in reversed(_block_names(prefix, config)):
        cols1, h1, cols2 = cache[block]
        da, grads[f"{block}.conv2.w"], grads[f"{block}.conv2.b"] = layers.conv_backward(
            dy, cols2, p[f"{block}.conv2.w"])
        dh1 = layers.relu_backward(da, h1)
        dx, grads[f"{block}.conv1.w"], grads[f"{block}.conv1.b"] = layers.conv_backward(
            dh1, cols1, p[f"{block}.conv1.w"])
        dy = dy + dx
        _check(dy, f"{block} (gradient)")
    return dy


def _forward_tensor(p: Tensors, config: EstimatorConfig, x: np.ndarray) -> Tuple[np.ndarray, Dict]:
    """x: (N, C, H, W) raw pixels, H and W multiples of 8. Returns (sigma, cache)"""
    if x.shape[1] != config.input_channels:
        raise DimensionError(f"Estimator expects {config.input_channels} channel(s), got {x.shape[1]}")
    if x.shape[2] % SIZE_MULTIPLE or x.shape[3] % SIZE_MULTIPLE:
        raise DimensionError(f"Spatial size must be a multiple of {SIZE_MULTIPLE}, got {x.shape[2:]}")
    cache: Dict = {"shapes": {}}
    x0 = x / PIXEL_PEAK
    h, cache["head"] = layers.conv_forward(x0, p["head.w"], p["head.b"])
    _check(h, "head")
    skips = []
    for level in range(LEVELS):
        h = _cascade_forward(p, f"enc{level}", config, h, cache)
        cache["shapes"][f"enc{level}"] = h.shape
        skips.append(h)
        h, cache[f"down{level}"] = layers.stride_conv_forward(h, p[f"down{level}.w"], p[f"down{level}.b"])
        _check(h, f"down{level}")
    h = _cascade_forward(p, "mid", config, h, cache)
    cache["shapes"]["mid"] = h.shape
    for level in reversed(range(LEVELS)):
        h, cache[f"up{level}"] = layers.conv_forward(h, p[f"up{level}.w"], p[f"up{level}.b"])
        h = layers.upsample_forward(h) + skips[level]
        _check(h, f"up{level}")
        h = _cascade_forward(p, f"dec{level}", config, h, cache)
        cache["shapes"][f"dec{level}"] = h.shape
    tail, cache["tail"] = layers.conv_forward(h, p["tail.w"], p["tail.b"])
    skip, cache["skip"] = layers.conv_forward(x0, p["skip.w"], p["skip.b"])
    pre = tail + skip
    _check(pre, "tail")
    cache["pre"] = pre
    return layers.softplus_forward(pre), cache


def _backward_tensor(p: Tensors, config: EstimatorConfig, dout: np.ndarray, cache: Dict) -> Tensors:
    grads: Tensors = {}
    dpre = layers.softplus_backward(dout, cache["pre"])
    _, grads["skip.w"], grads["skip.b"] = layers.conv_backward(dpre, cache["skip"], p["skip.w"])
    dh, grads["tail.w"], grads["tail.b"] = layers.conv_backward(dpre, cache["tail"], p["tail.w"])
    dskips = [None] * LEVELS
    for level in range(LEVELS):
        dh = _cascade_backward(p, f"dec{level}", config, dh, cache, grads)
        dskips[level] = dh
        dh, grads[f"up{level}.w"], grads[f"up{level}.b"] = layers.conv_backward(
            layers.upsample_backward(dh), cache[f"up{level}"], p[f"up{level}.w"])
        _check(dh, f"up{level} (gradient)")
    dh = _cascade_backward(p, "mid", config, dh, cache, grads)
    for level in reversed(range(LEVELS)):
        dh, grads[f"down{level}.w"], grads[f"down{level}.b"] = layers.stride_conv_backward(
            dh, cache[f"down{level}"], p[f"down{level}.w"])
        dh = _cascade_backward(p, f"enc{level}", config, dh + dskips[level], cache, grads)
    _, grads["head.w"], grads["head.b"] = layers.conv_backward(dh, cache["head"], p["head.w"])
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"Non-finite gradient for {name}", layer=name.rsplit(".", 1)[0])
    return grads


def _pad_amounts(height: int, width: int) -> Tuple[int, int]:
    return (-height) % SIZE_MULTIPLE, (-width) % SIZE_MULTIPLE


def _to_tensor(image: Raster) -> Tuple[np.ndarray, Tuple[int, int]]:
    """(1, C, H', W') with reflective bottom/right padding to a multiple of 8"""
    pad_h, pad_w = _pad_amounts(image.height, image.width)
    data = image.data
    if pad_h or pad_w:
        mode = "reflect" if min(image.height, image.width) > 1 else "edge"
        data = np.pad(data, ((0, pad_h), (0, pad_w), (0, 0)), mode=mode)
    return data.transpose(2, 0, 1)[None], image.shape


def forward(params: EstimatorParams, config: EstimatorConfig, image: Raster) -> SigmaMap:
    """Estimate the sigma-map of one image in a single pass"""
    x, (height, width) = _to_tensor(image)
    out, _ = _forward_tensor(params.tensors, config, x)
    return SigmaMap(out[0, 0, :height, :width])


def feature_shapes(params: EstimatorParams, config: EstimatorConfig, image: Raster) -> Dict[str, Tuple[int, ...]]:
    """Activation shapes after each cascade (enc0..2, mid, dec2..0)"""
    x, _ = _to_tensor(image)
    _, cache = _forward_tensor(params.tensors, config, x)
    return dict(cache["shapes"])


def loss_mse(pred: SigmaMap, target: SigmaMap) -> float:
    """Mean of squared per-pixel differences"""
    if pred.shape != target.shape:
        raise DimensionError(f"Shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    return float(np.mean(diff * diff))


def _stack(batch: Sequence[TrainingSample], config: EstimatorConfig) -> Tuple[np.ndarray, np.ndarray]:
    if not batch:
        raise ParameterError("Empty batch")
    shape = batch[0].patch.data.shape
    for sample in batch:
        if sample.patch.data.shape != shape:
            raise DimensionError("All patches in a batch must share one shape")
    if shape[2] != config.input_channels:
        raise DimensionError(f"Estimator expects {config.input_channels} channel(s), got {shape[2]}")
    x = np.stack([s.patch.data.transpose(2, 0, 1) for s in batch])
    t = np.stack([s.target.data for s in batch])[:, None]
    return x, t


def loss_and_gradients(params: EstimatorParams, config: EstimatorConfig,
                       batch: Sequence[TrainingSample]) -> Tuple[float, Tensors]:
    """Mean MSE over the batch and its gradient for every parameter"""
    x, t = _stack(batch, config)
    out, cache = _forward_tensor(params.tensors, config, x)
    diff = out - t
    loss = float(np.mean(diff * diff))
    dout = 2.0 * diff / diff.size
    return loss, _backward_tensor(params.tensors, config, dout, cache)


def backward(params: EstimatorParams, config: EstimatorConfig, batch: Sequence[TrainingSample]) -> Tensors:
    """Gradient of the mean batch MSE with respect to every parameter"""
    return loss_and_gradients(params, config, batch)[1]


def adam_step(params: EstimatorParams, gradients: Tensors, lr: float,
              config: EstimatorConfig = EstimatorConfig()) -> EstimatorParams:
    """Bias-corrected Adam update applied in place; increments the iteration counter"""
    for name in sorted(params.tensors):
        if not np.isfinite(gradients[name]).all():
            raise NumericalError(f"Non-finite gradient for {name}", layer=name)
    t = params.iteration + 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name in sorted(params.tensors):
        g = gradients[name]
        m = params.m[name]
        v = params.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params.tensors[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
    params.iteration = t
    return params


def save_estimator(params: EstimatorParams, config: EstimatorConfig, path: str):
    tensors = dict(params.tensors)
    tensors.update({f"adam.m/{k}": t for k, t in params.m.items()})
    tensors.update({f"adam.v/{k}": t for k, t in params.v.items()})
    save_checkpoint(path, config.to_dict(), params.iteration, tensors)


def load_estimator(path: str) -> Tuple[EstimatorParams, EstimatorConfig]:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    echo, iteration, tensors = load_checkpoint(path)
    config = EstimatorConfig.from_dict(echo)
    weights = {k: t for k, t in tensors.items() if not k.startswith("adam.")}
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in weights or weights[name].shape != shape:
            raise DimensionError(f"{path}: tensor {name} missing or not of shape {shape}")
    m = {k.split("/", 1)[1]: t for k, t in tensors.items() if k.startswith("adam.m/")}
    v = {k.split("/", 1)[1]: t for k, t in tensors.items() if k.startswith("adam.v/")}
    return EstimatorParams(weights, m, v, iteration), config


def train(corpus: Corpus, config: EstimatorConfig, schedule: TrainSchedule, spec: NoiseSpec, rng: Prng,
          params: Optional[EstimatorParams] = None,
          on_step: Optional[Callable[[int, float, float], None]] = None,
          checkpoint_dir: Optional[str] = None,
          brightness_source: str = "fragment",
          progress: bool = True) -> EstimatorParams:
    """Custom training loop; iteration i always draws its minibatch from rng.child(i + 1)

    Passing `params` resumes from their iteration counter.
    """
    corpus.validate(schedule.patch)
    if params is None:
        params = init_params(config, rng.child(0))
    start = params.iteration
    logger.info("Training %d iterations (batch %d, patch %d, stage boundary %d)",
                schedule.total_iterations, schedule.batch, schedule.patch, schedule.stage_boundary)
    window = deque(maxlen=max(schedule.log_every, 1))
    bar = tqdm(range(start, schedule.total_iterations), desc="Training", unit="it", disable=not progress)
    for iteration in bar:
        batch = make_minibatch(corpus, schedule.batch, schedule.patch, spec, rng.child(iteration + 1),
                               brightness_source=brightness_source, channels=config.input_channels)
        loss, grads = loss_and_gradients(params, config, batch)
        lr = schedule.lr_at(iteration)
        adam_step(params, grads, lr, config)
        window.append(loss)
        if on_step:
            on_step(params.iteration, lr, loss)
        if params.iteration % schedule.log_every == 0:
            average = sum(window) / len(window)
            bar.set_postfix(loss=f"{average:.4g}", lr=f"{lr:.1e}")
            logger.info("iteration %d: moving-average loss %.6g (lr %.1e)", params.iteration, average, lr)
        if checkpoint_dir and schedule.checkpoint_every and params.iteration % schedule.checkpoint_every == 0:
            os.makedirs(checkpoint_dir, exist_ok=True)
            path = os.path.join(checkpoint_dir, f"iter_{params.iteration:06d}.ckpt")
            save_estimator(params, config, path)
            logger.info("Checkpoint written: %s", path)
    return params


def receptive_radius(config: EstimatorConfig) -> int:
    """Upper bound on how many input pixels on each side can influence one output pixel"""
    radius = 2 + 4 * config.blocks  # head, tail and the two full-resolution cascades
    for level in range(1, LEVELS):
        radius += 4 * config.blocks * 2 ** level
    radius += 2 * config.blocks * 2 ** LEVELS
    # cell alignment of each stride-2 stage and each upsampling
    radius += 2 * (2 ** (LEVELS + 1) - 2)
    return radius


def context_margin(config: EstimatorConfig) -> int:
    """Context read around every inference tile: the receptive radius plus one padding cell, rounded up to 8"""
    need = receptive_radius(config) + SIZE_MULTIPLE
    return -(-need // SIZE_MULTIPLE) * SIZE_MULTIPLE


def _tile_spans(size: int, tile: int, step: int) -> List[Tuple[int, int]]:
    """Core (start, stop) spans; starts are multiples of 8 and the last span runs to the edge"""
    if size <= tile:
        return [(0, size)]
    starts = list(range(0, size - tile, step))
    last = (size - tile) // SIZE_MULTIPLE * SIZE_MULTIPLE
    if starts[-1] == last:
        starts.pop()
    return [(s, s + tile) for s in starts] + [(last, size)]


def _feather(length: int, overlap: int) -> np.ndarray:
    """Linear ramp over `overlap` pixels at both ends, 1 inside; strictly positive"""
    idx = np.arange(length)
    ramp = np.minimum(idx + 1, length - idx) / (overlap + 1)
    return np.minimum(ramp, 1.0)


def estimate(params: EstimatorParams, config: EstimatorConfig, image: Raster,
             tile: int = DEFAULT_TILE, overlap: int = TILE_OVERLAP) -> SigmaMap:
    """Sigma-map of an image of any size

    Whole-image inference when it fits in one tile. Otherwise every tile is run
    with context_margin() extra pixels of context on each side, cropped back to
    the tile and blended with its neighbours by linear feathering; tiles start on
    the 8-pixel grid, so the result matches whole-image inference. A grayscale
    estimator on a colour image estimates each channel and averages the maps.
    """
    if tile < 64 or tile % SIZE_MULTIPLE:
        raise ParameterError(f"Tile must be >= 64 and a multiple of {SIZE_MULTIPLE}, got {tile}")
    if not 0 <= overlap < tile // 2 or overlap % SIZE_MULTIPLE:
        raise ParameterError(f"Overlap must be a multiple of {SIZE_MULTIPLE} in [0, {tile // 2}), got {overlap}")
    if image.channels != config.input_channels:
        if config.input_channels == 1 and image.channels == 3:
            maps = [estimate(params, config, Raster(image.data[:, :, c]), tile, overlap) for c in range(3)]
            return SigmaMap(np.mean([m.data for m in maps], axis=0))
        raise DimensionError(f"Estimator expects {config.input_channels} channel(s), got {image.channels}")
    if image.height <= tile and image.width <= tile:
        return forward(params, config, image)

    margin = context_margin(config)
    step = tile - overlap
    total = np.zeros(image.shape)
    weight = np.zeros(image.shape)
    for top, bottom in _tile_spans(image.height, tile, step):
        for left, right in _tile_spans(image.width, tile, step):
            y0, x0 = max(0, top - margin), max(0, left - margin)
            y1, x1 = min(image.height, bottom + margin), min(image.width, right + margin)
            window = forward(params, config, image.crop(y0, x0, y1 - y0, x1 - x0)).data
            core = window[top - y0:bottom - y0, left - x0:right - x0]
            wt = np.outer(_feather(bottom - top, overlap), _feather(right - left, overlap))
            total[top:bottom, left:right] += wt * core
            weight[top:bottom, left:right] += wt
    return SigmaMap(total / weight)
