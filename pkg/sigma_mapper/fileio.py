"""
File formats for Sigma Mapper
8-bit PNG / binary PGM (P5) / binary PPM (P6) rasters through Pillow, unquantized float rasters
as .npy files, and the SMAP sigma-map container.

SMAP layout (all little-endian):
    offset 0   4 bytes   magic b"SMAP"
    offset 4   1 byte    format version (1)
    offset 5   uint32    width
    offset 9   uint32    height
    offset 13  float32   width * height values, row-major
"""

import os
import struct
from typing import Tuple

import numpy as np
from PIL import Image

from .core import Raster, SigmaMap
from .errors import DimensionError, FormatError, TruncatedFileError, UnsupportedFormatError

SMAP_MAGIC = b"SMAP"
SMAP_VERSION = 1
SMAP_HEADER = struct.Struct("<4sBII")

# Largest accepted raster (pixels); guards against forged headers
MAX_PIXELS = 1 << 28

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_SUFFIX_FORMATS = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}


def _sniff(path: str) -> str:
    """Return 'PNG' or 'PNM' from the file signature"""
    with open(path, "rb") as f:
        head = f.read(8)
    if head.startswith(_PNG_SIGNATURE):
        return "PNG"
    if head[:2] in (b"P5", b"P6"):
        return "PNM"
    if head[:2] in (b"P1", b"P2", b"P3", b"P4"):
        raise UnsupportedFormatError(f"{path}: only binary PGM (P5) and PPM (P6) are supported")
    raise UnsupportedFormatError(f"{path}: not a PNG, PGM or PPM file")


def read_raster_size(path: str) -> Tuple[int, int, int]:
    """Read (width, height, channels) from the image header without decoding pixels"""
    _sniff(path)
    try:
        with Image.open(path) as im:
            mode, (width, height) = im.mode, im.size
    except (OSError, Image.DecompressionBombError) as e:
        raise FormatError(f"{path}: {e}") from e
    channels = {"L": 1, "RGB": 3}.get(mode)
    if channels is None:
        raise UnsupportedFormatError(f"{path}: unsupported image mode {mode!r} (need 8-bit gray or RGB)")
    return width, height, channels


def load_raster(path: str) -> Raster:
    """Load an 8-bit grayscale or RGB PNG/PGM/PPM file"""
    _sniff(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                raise UnsupportedFormatError(
                    f"{path}: unsupported image mode {im.mode!r} (need 8-bit gray or RGB)"
                )
            width, height = im.size
            if width * height > MAX_PIXELS:
                raise DimensionError(f"{path}: {width}x{height} exceeds the {MAX_PIXELS} pixel limit")
            im.load()
            pixels = np.asarray(im, dtype=np.uint8)
    except Image.DecompressionBombError as e:
        raise DimensionError(f"{path}: {e}") from e
    except OSError as e:
        # Pillow reports truncated or corrupt payloads as OSError
        raise TruncatedFileError(f"{path}: {e}") from e
    return Raster(pixels.astype(np.float64))


def quantize(raster: Raster) -> np.ndarray:
    """Round to integers and clamp to [0, 255] as uint8, shape (H, W) or (H, W, 3)"""
    pixels = np.clip(np.rint(raster.data), 0, 255).astype(np.uint8)
    return pixels[:, :, 0] if raster.channels == 1 else pixels


def save_raster(raster: Raster, path: str):
    """Save as PNG (.png), PGM (.pgm, 1 channel) or PPM (.ppm, 3 channels)"""
    suffix = os.path.splitext(path)[1].lower()
    fmt = _SUFFIX_FORMATS.get(suffix)
    if fmt is None:
        raise UnsupportedFormatError(f"{path}: unknown image suffix {suffix!r}")
    if suffix == ".pgm" and raster.channels != 1:
        raise DimensionError(f"{path}: PGM needs a single-channel raster")
    if suffix == ".ppm" and raster.channels != 3:
        raise DimensionError(f"{path}: PPM needs a three-channel raster")
    image = Image.fromarray(quantize(raster))
    image.save(path, format=fmt)


def save_float_raster(raster: Raster, path: str):
    """Write the raster unquantized (float64 .npy, shape (H, W, C))"""
    np.save(path, raster.data, allow_pickle=False)


def load_float_raster(path: str) -> Raster:
    try:
        data = np.load(path, allow_pickle=False)
    except (ValueError, EOFError) as e:
        raise FormatError(f"{path}: not a float raster ({e})") from e
    if data.ndim != 3 or data.shape[2] not in (1, 3) or not np.issubdtype(data.dtype, np.floating):
        raise FormatError(f"{path}: expected a float (H, W, 1|3) array, got {data.dtype} {data.shape}")
    return Raster(data.astype(np.float64))


def load_image(path: str) -> Raster:
    """Float raster for .npy, else an 8-bit image file"""
    if path.lower().endswith(".npy"):
        return load_float_raster(path)
    return load_raster(path)


def encode_sigma_map(sigma_map: SigmaMap) -> bytes:
    header = SMAP_HEADER.pack(SMAP_MAGIC, SMAP_VERSION, sigma_map.width, sigma_map.height)
    return header + np.ascontiguousarray(sigma_map.data, dtype="<f4").tobytes()


def decode_sigma_map(blob: bytes, source: str = "<bytes>") -> SigmaMap:
    if len(blob) < SMAP_HEADER.size:
        raise TruncatedFileError(f"{source}: file shorter than the SMAP header")
    magic, version, width, height = SMAP_HEADER.unpack_from(blob)
    if magic != SMAP_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {SMAP_MAGIC!r}")
    if version != SMAP_VERSION:
        raise FormatError(f"{source}: SMAP version {version} is not supported")
    if width == 0 or height == 0 or width * height > MAX_PIXELS:
        raise DimensionError(f"{source}: invalid map size {width}x{height}")
    payload = blob[SMAP_HEADER.size:]
    expected = width * height * 4
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{source}: declared {width}x{height} needs {expected} bytes, found {len(payload)}"
        )
    if len(payload) > expected:
        raise FormatError(f"{source}: {len(payload) - expected} trailing bytes after the map")
    values = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    if not np.isfinite(values).all() or (values < 0).any():
        raise FormatError(f"{source}: map values must be finite and non-negative")
    return SigmaMap(values.astype(np.float64))


def save_sigma_map(sigma_map: SigmaMap, path: str):
    with open(path, "wb") as f:
        f.write(encode_sigma_map(sigma_map))


def load_sigma_map(path: str) -> SigmaMap:
    with open(path, "rb") as f:
        return decode_sigma_map(f.read(), source=path)
