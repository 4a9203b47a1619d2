"""
Configuration module for Sigma Mapper
Contains all constants, defaults and the run configuration shared by the CLI verbs.
"""

import configparser
import hashlib
import json
import os
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from .errors import ParameterError, UsageError

# Load environment variables
load_dotenv()

# Noise synthesis
HALF_NORMAL_SCALE = 40.0  # R of the mean-variance sampler
TEST_MAP_MODELS = ("gaussian_peak", "linear_ramp", "sinusoidal")
TEST_MAP_FLOOR = 0.05  # positivity floor relative to the peak value
SIGMA_AV_LEVELS = (5, 7, 10, 15, 20, 30, 45)
SIGMA_T_LEVELS = (3, 5, 7, 10, 15, 20, 30, 50, 75)
SYNTH_JITTER = 0.25  # per-image randomisation of test-map shapes

# Patch pipeline
FULL_PATCH_SIZE = 128
DESK_PATCH_SIZE = 64
FRAGMENT_CANDIDATES = 3

# Estimator topology
LEVELS = 3
DEFAULT_CHANNELS = (16, 32, 64)
DEFAULT_BLOCKS = 2
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# Training schedules
FULL_ITERATIONS = 150000
FULL_BATCH = 32
FULL_LR_STAGE1 = 1e-5
FULL_LR_STAGE2 = 5e-6
DESK_ITERATIONS = 3000
DESK_BATCH = 8
DESK_LR_STAGE1 = 1e-3
DESK_LR_STAGE2 = 5e-4
STAGE1_FRACTION = 2.0 / 3.0
CHECKPOINT_EVERY = 500
LOG_EVERY = 50

# Inference
DEFAULT_TILE = 256
TILE_OVERLAP = 16

# Classical baseline
DCT_BLOCK = 8
DCT_STEP = 4
DCT_POOL = 4
MAD_TO_SIGMA = 1.4826

# Denoiser
DENOISE_STEP = 1
DENOISE_THRESHOLD_FACTOR = 2.7

# Metrics
EPS_M_THRESHOLD = 0.1
EPS_M_AGGREGATIONS = ("per_image", "concatenated")  # mean of per-image ratios, or one pooled ratio
PIXEL_PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MIN_IMAGE_SIZE = SSIM_WINDOW  # smallest test image every metric accepts

# Exit codes
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

# Default values
DEFAULT_SEED = 20220101
DEFAULT_OUTPUT_DIR = "runs"
DEFAULT_CHECKPOINT_NAME = "estimator.ckpt"

# Sections and keys accepted in the key=value config file
_SCHEMA = {
    "global": {"seed": int, "out": str, "manifest": str, "log_level": str},
    "noise": {"R": float, "clip": bool, "color_shared_map": bool, "sigma_av": "floats",
              "sigma_t": "floats", "models": "strings", "brightness_source": str,
              "jitter": float},
    "estimator": {"channels": "ints", "blocks": int, "input_channels": int,
                  "beta1": float, "beta2": float, "epsilon": float, "tile": int},
    "schedule": {"iterations": int, "batch": int, "patch": int, "lr_stage1": float,
                 "lr_stage2": float, "stage1_fraction": float, "checkpoint_every": int,
                 "log_every": int},
    "baseline": {"block": int, "step": int, "pool": int},
    "denoise": {"step": int, "threshold_factor": float},
    "metrics": {"aggregation": str},
}


def _parse_value(kind, raw: str):
    """Convert a raw config string to the declared type"""
    raw = raw.strip()
    if kind is bool:
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "floats":
        return [float(v) for v in raw.replace(",", " ").split()]
    if kind == "ints":
        return [int(v) for v in raw.replace(",", " ").split()]
    if kind == "strings":
        return [v for v in raw.replace(",", " ").split()]
    return kind(raw)


def _env_seed(raw: Optional[str]) -> int:
    if not raw:
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SIGMA_MAPPER_SEED must be an integer, got {raw!r}")


class Config:
    """Configuration class for Sigma Mapper"""

    def __init__(self):
        env_seed = os.getenv("SIGMA_MAPPER_SEED")
        self.values: Dict[str, Dict[str, Any]] = {
            "global": {
                "seed": _env_seed(env_seed),
                "out": os.getenv("SIGMA_MAPPER_OUT", DEFAULT_OUTPUT_DIR),
                "manifest": None,
                "log_level": os.getenv("SIGMA_MAPPER_LOG_LEVEL", "INFO"),
            },
            "noise": {
                "R": HALF_NORMAL_SCALE,
                "clip": False,
                "color_shared_map": True,
                "sigma_av": [float(s) for s in SIGMA_AV_LEVELS],
                "sigma_t": [float(s) for s in SIGMA_T_LEVELS],
                "models": list(TEST_MAP_MODELS),
                "brightness_source": "fragment",
                "jitter": SYNTH_JITTER,
            },
            "estimator": {
                "channels": list(DEFAULT_CHANNELS),
                "blocks": DEFAULT_BLOCKS,
                "input_channels": 1,
                "beta1": ADAM_BETA1,
                "beta2": ADAM_BETA2,
                "epsilon": ADAM_EPSILON,
                "tile": DEFAULT_TILE,
            },
            "schedule": {
                "iterations": DESK_ITERATIONS,
                "batch": DESK_BATCH,
                "patch": DESK_PATCH_SIZE,
                "lr_stage1": DESK_LR_STAGE1,
                "lr_stage2": DESK_LR_STAGE2,
                "stage1_fraction": STAGE1_FRACTION,
                "checkpoint_every": CHECKPOINT_EVERY,
                "log_every": LOG_EVERY,
            },
            "baseline": {"block": DCT_BLOCK, "step": DCT_STEP, "pool": DCT_POOL},
            "denoise": {"step": DENOISE_STEP, "threshold_factor": DENOISE_THRESHOLD_FACTOR},
            "metrics": {"aggregation": EPS_M_AGGREGATIONS[0]},
        }

    @classmethod
    def from_file(cls, path: Optional[str]) -> "Config":
        """Build a configuration from defaults, then a key=value file with sections"""
        config = cls()
        if path:
            if not os.path.isfile(path):
                raise FileNotFoundError(f"Config file not found: {path}")
            parser = configparser.ConfigParser()
            parser.optionxform = str  # keep 'R' case-sensitive
            try:
                parser.read(path, encoding="utf-8")
            except configparser.Error as e:
                raise UsageError(f"Malformed config file {path}: {e}") from e
            for section in parser.sections():
                for key, raw in parser.items(section):
                    config.set(section, key, raw)
        return config

    def set(self, section: str, key: str, raw: Any):
        """Set one value; strings are parsed according to the schema"""
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise UsageError(f"Unknown config key: [{section}] {key}")
        kind = _SCHEMA[section][key]
        if isinstance(raw, str) and kind is not str:
            try:
                raw = _parse_value(kind, raw)
            except ValueError as e:
                raise UsageError(f"Bad value for [{section}] {key}: {e}") from e
        self.values[section][key] = raw

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def apply_overrides(self, overrides: Dict[str, Any]):
        """Apply 'section.key' -> value overrides, skipping None (flag not given)"""
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, key = dotted.split(".", 1)
            self.set(section, key, value)

    @property
    def seed(self) -> int:
        return self.values["global"]["seed"]

    @property
    def out_dir(self) -> str:
        return self.values["global"]["out"]

    def validate(self) -> bool:
        """Validate configuration"""
        seed = self.seed
        if not 0 <= seed < 2 ** 64:
            raise ParameterError(f"Seed must be a 64-bit unsigned integer, got {seed}")
        noise = self.values["noise"]
        if not noise["R"] > 0:
            raise ParameterError("[noise] R must be positive")
        if noise["brightness_source"] not in ("fragment", "cross_image"):
            raise UsageError("[noise] brightness_source must be 'fragment' or 'cross_image'")
        if noise["jitter"] < 0:
            raise ParameterError("[noise] jitter must be non-negative")
        unknown = [m for m in noise["models"] if m not in TEST_MAP_MODELS]
        if unknown:
            raise UsageError(f"Unknown map model(s): {', '.join(unknown)}")
        est = self.values["estimator"]
        if len(est["channels"]) != LEVELS or min(est["channels"]) <= 0:
            raise ParameterError(f"[estimator] channels must list {LEVELS} positive widths")
        if est["input_channels"] not in (1, 3):
            raise ParameterError("[estimator] input_channels must be 1 or 3")
        sched = self.values["schedule"]
        if sched["lr_stage2"] >= sched["lr_stage1"]:
            raise ParameterError("[schedule] lr_stage2 must be smaller than lr_stage1")
        if sched["batch"] < 2 or sched["batch"] % 2:
            raise ParameterError("[schedule] batch must be even and at least 2")
        if self.values["metrics"]["aggregation"] not in EPS_M_AGGREGATIONS:
            raise UsageError(f"[metrics] aggregation must be one of {', '.join(EPS_M_AGGREGATIONS)}")
        return True

    def as_dict(self) -> Dict[str, Dict[str, Any]]:
        """Canonical echo of every value (used in provenance records)"""
        return json.loads(json.dumps(self.values, sort_keys=True))

    def digest(self) -> str:
        """SHA-256 of the canonical echo"""
        blob = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def float_list(self, section: str, key: str) -> List[float]:
        return [float(v) for v in self.values[section][key]]
