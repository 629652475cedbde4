"""
PCQW1 named-tensor checkpoint codec

Layout (all integers little-endian uint32):
    b"PCQW1"
    repeated until end of file:
        name length, name (utf-8), rank, extents[rank], float32 payload
"""

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from .errors import CheckpointError

MAGIC = b"PCQW1"


def encode_tensor(name: str, value: np.ndarray) -> bytes:
    """Encode one named tensor record"""
    name_bytes = name.encode("utf-8")
    value = np.asarray(value)
    result = struct.pack("<I", len(name_bytes)) + name_bytes
    result += struct.pack("<I", value.ndim)
    result += struct.pack(f"<{value.ndim}I", *value.shape)
    result += np.ascontiguousarray(value, dtype="<f4").tobytes()
    return result


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Encode a mapping of names to arrays; insertion order is kept"""
    return MAGIC + b"".join(encode_tensor(name, value) for name, value in tensors.items())


def decode_with_remainder(data: bytes, offset: int) -> Tuple[str, np.ndarray, int]:
    """
    Decode the record starting at ``offset``.

    Returns:
        (name, float32 array, offset of the next record)
    """
    try:
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + name_len > len(data):
            raise CheckpointError(f"truncated name at byte {offset}")
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
    except struct.error:
        raise CheckpointError(f"truncated record header at byte {offset}")
    except UnicodeDecodeError:
        raise CheckpointError(f"invalid tensor name at byte {offset}")
    count = int(np.prod(shape)) if rank else 1
    end = offset + 4 * count
    if end > len(data):
        raise CheckpointError(f"truncated payload for '{name}' at byte {offset}")
    value = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
    return name, value.astype(np.float32), end


def decode(data: bytes) -> Dict[str, np.ndarray]:
    """Decode a full PCQW1 blob"""
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a PCQW1 checkpoint (bad magic)")
    tensors: Dict[str, np.ndarray] = OrderedDict()
    offset = len(MAGIC)
    while offset < len(data):
        name, value, offset = decode_with_remainder(data, offset)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name '{name}'")
        tensors[name] = value
    return tensors


def save(tensors: Mapping[str, np.ndarray], path: Union[str, Path]):
    Path(path).write_bytes(encode(tensors))


def load(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        return decode(path.read_bytes())
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}")
