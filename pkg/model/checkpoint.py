"""Python module that reads and writes the versioned binary checkpoint format.

Layout (little-endian)::

    b"XNM1" | version u32 | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 x rank | float32 data
    checksum: 8-byte BLAKE2b digest of every preceding byte

Parameters and batch-norm statistics use their model names; optimizer state is
stored as extra tensors under ``opt/``.
"""
import hashlib
import logging
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from utilities.exceptions import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"XNM1"
FORMAT_VERSION = 1
CHECKSUM_BYTES = 8
OPTIMIZER_PREFIX = "opt/"

_HEADER = struct.Struct("<4sII")
_STORED_DTYPE = np.dtype("<f4")

PathLike = Union[str, Path]


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=CHECKSUM_BYTES).digest()


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named arrays (cast to float32) into the checkpoint byte layout."""
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"Tensor name too long: {name[:40]}...")
        if array.ndim > 0xFF:
            raise CheckpointError(f"Tensor '{name}' has unsupported rank {array.ndim}")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=_STORED_DTYPE).tobytes())
    payload = b"".join(chunks)
    return payload + _checksum(payload)


def decode_tensors(blob: bytes, source: str = "<bytes>") -> "OrderedDict[str, np.ndarray]":
    """
    Parse checkpoint bytes back into named float32 arrays.

    Raises:
        CheckpointError: On a bad magic, unknown version, checksum mismatch or truncated data
    """
    if len(blob) < _HEADER.size + CHECKSUM_BYTES:
        raise CheckpointError(f"Corrupt checkpoint {source}: file is truncated ({len(blob)} bytes)")
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"Corrupt checkpoint {source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Checkpoint {source} has format version {version}, expected {FORMAT_VERSION}")
    payload, digest = blob[:-CHECKSUM_BYTES], blob[-CHECKSUM_BYTES:]
    if _checksum(payload) != digest:
        raise CheckpointError(f"Corrupt checkpoint {source}: checksum mismatch")

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = _HEADER.size
    try:
        for _ in range(count):
            (name_length,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + name_length].decode("utf-8")
            offset += name_length
            (rank,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            end = offset + size * _STORED_DTYPE.itemsize
            if end > len(payload):
                raise CheckpointError(f"Corrupt checkpoint {source}: data of '{name}' runs past the end")
            tensors[name] = np.frombuffer(payload[offset:end], dtype=_STORED_DTYPE).reshape(dims).astype(np.float32)
            offset = end
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint {source}: {e}") from e
    if offset != len(payload):
        raise CheckpointError(f"Corrupt checkpoint {source}: {len(payload) - offset} trailing bytes")
    if len(tensors) != count:
        raise CheckpointError(f"Corrupt checkpoint {source}: duplicate tensor names")
    return tensors


def read_checkpoint(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    """Read every tensor stored in a checkpoint file."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    return decode_tensors(blob, source=str(path))


def save_checkpoint(model, path: PathLike, optimizer_state: Optional[Mapping[str, np.ndarray]] = None) -> Path:
    """
    Write the model's parameters, BN statistics and optional optimizer state.

    The file is written next to its destination and renamed into place.

    Args:
        model: An ExpressNetModel
        path: Destination file
        optimizer_state: Extra arrays; names get the ``opt/`` prefix if missing

    Returns:
        The written path
    """
    path = Path(path)
    tensors = model.parameter_store().state_dict()
    for name, array in (optimizer_state or {}).items():
        key = name if name.startswith(OPTIMIZER_PREFIX) else f"{OPTIMIZER_PREFIX}{name}"
        tensors[key] = np.asarray(array)
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    partial.write_bytes(encode_tensors(tensors))
    os.replace(partial, path)
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {path}")
    return path


def load_checkpoint(path: PathLike, model) -> "OrderedDict[str, np.ndarray]":
    """
    Restore a model in place from a checkpoint.

    Args:
        path: Checkpoint file
        model: An ExpressNetModel built from the matching configuration

    Returns:
        The ``opt/`` tensors with the prefix stripped (empty if none were saved)

    Raises:
        CheckpointError: If the file is corrupt or does not match the model's tensors
    """
    tensors = read_checkpoint(path)
    model_state = OrderedDict((k, v) for k, v in tensors.items() if not k.startswith(OPTIMIZER_PREFIX))
    optimizer_state = OrderedDict(
        (k[len(OPTIMIZER_PREFIX):], v) for k, v in tensors.items() if k.startswith(OPTIMIZER_PREFIX)
    )
    model.parameter_store().load_state_dict(model_state)
    logger.info(f"Loaded checkpoint {path} ({len(model_state)} model tensors, {len(optimizer_state)} optimizer tensors)")
    return optimizer_state
