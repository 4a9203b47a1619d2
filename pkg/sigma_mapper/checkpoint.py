"""
Checkpoint container for Sigma Mapper
Versioned binary file with a JSON config echo, an iteration counter and named float64 tensors.

Layout (little-endian):
    4 bytes   magic b"SMCK"
    uint8     version (1)
    uint32    length of the UTF-8 JSON config echo, then the JSON bytes
    uint64    iteration counter
    uint32    tensor count, then for each tensor:
        uint16   name length, then the UTF-8 name
        uint8    ndim, then ndim uint32 dimensions
        float64  values, C order
Tensors are written in sorted name order so identical state gives identical bytes.
"""

import json
import struct
from typing import Any, Dict, Tuple

import numpy as np

from .errors import FormatError, TruncatedFileError

CHECKPOINT_MAGIC = b"SMCK"
CHECKPOINT_VERSION = 1


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError(f"{self.source}: checkpoint ends at byte {len(self.blob)}, needed {self.pos + n}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def encode_checkpoint(config: Dict[str, Any], iteration: int, tensors: Dict[str, np.ndarray]) -> bytes:
    echo = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(echo)), echo,
             struct.pack("<QI", iteration, len(tensors))]
    for name in sorted(tensors):
        array = np.asarray(tensors[name], dtype="<f8", order="C")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)))
        parts.append(key)
        parts.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Tuple[Dict[str, Any], int, Dict[str, np.ndarray]]:
    reader = _Reader(blob, source)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    version, echo_len = reader.unpack("<BI")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: checkpoint version {version} is not supported")
    try:
        config = json.loads(reader.take(echo_len).decode("utf-8"))
    except ValueError as e:
        raise FormatError(f"{source}: corrupt config echo ({e})") from e
    iteration, count = reader.unpack("<QI")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64)
        tensors[name] = values.reshape(shape)
    if reader.pos != len(blob):
        raise FormatError(f"{source}: {len(blob) - reader.pos} trailing bytes after the last tensor")
    return config, iteration, tensors


def save_checkpoint(path: str, config: Dict[str, Any], iteration: int, tensors: Dict[str, np.ndarray]):
    with open(path, "wb") as f:
        f.write(encode_checkpoint(config, iteration, tensors))


def load_checkpoint(path: str) -> Tuple[Dict[str, Any], int, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read(), source=path)
