"""
rccformer.core.checkpoint - Flat binary checkpoint container

Byte layout (all integers little-endian):

    magic        4 bytes   b"RCCK"
    version      uint32    1
    header_len   uint32    length of the JSON header in bytes
    header       UTF-8     JSON-encoded ModelConfig
    n_entries    uint32
    entry × n_entries:
        name_len uint32
        name     UTF-8     dotted parameter or buffer name
        ndim     uint32
        dims     uint64 × ndim
        payload  float64 little-endian, C order, prod(dims) values

Entries are written in model traversal order (parameters, then buffers).
"""

import logging
import os
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .errors import CheckpointError, NonFiniteError
from .model_config import ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"RCCK"
VERSION = 1
_F64 = np.dtype("<f8")


def save_checkpoint(path: Union[str, Path], config: ModelConfig,
                    state: Dict[str, np.ndarray]) -> None:
    """
    Write ``state`` with its model configuration

    The file is replaced atomically; a state holding any non-finite value is
    refused and the previous file is left untouched.
    """
    for name, value in state.items():
        bad = ~np.isfinite(value)
        if bad.any():
            raise NonFiniteError(f"refusing to checkpoint non-finite '{name}'",
                                 tuple(np.argwhere(bad)[0]))

    header = config.model_dump_json().encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(header)), header,
              struct.pack("<I", len(state))]
    for name, value in state.items():
        value = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype=_F64).tobytes())

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as file:
        file.write(b"".join(chunks))
    os.replace(tmp, path)
    logger.info(f"Wrote checkpoint {path} ({len(state)} entries)")


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.raw[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(
    path: Union[str, Path],
) -> Tuple[ModelConfig, Dict[str, np.ndarray]]:
    """
    Read a checkpoint

    Returns:
        (ModelConfig, name -> array) in file order
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    reader = _Reader(raw, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an rccformer checkpoint (bad magic)")
    version, header_len = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = reader.take(header_len).decode("utf-8")
        config = ModelConfig.model_validate_json(header)
    except ValueError as e:
        raise CheckpointError(f"{path}: invalid config header: {e}") from e

    (count,) = reader.unpack("<I")
    state: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<I")
        dims = reader.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(dims)) if ndim else 1
        payload = np.frombuffer(reader.take(size * 8), dtype=_F64)
        state[name] = payload.astype(np.float64).reshape(dims)
    if reader.pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return config, state
