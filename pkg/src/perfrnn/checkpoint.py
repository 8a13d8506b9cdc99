"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PRNN"  u32 version  | u32 header_len  header(JSON, UTF-8)  tensors(f32) | u32 crc32

The CRC covers everything between the version word and the CRC itself.
Tensors follow ``Parameters.arrays()`` order, row-major.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .lstm import ModelConfig, Parameters, param_shapes

MAGIC = b"PRNN"
FORMAT_MAJOR = 1
FORMAT_MINOR = 0
FORMAT_VERSION = (FORMAT_MAJOR << 16) | FORMAT_MINOR


class CheckpointError(Exception):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptChecksum(CheckpointError):
    pass


class IoFailure(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: ModelConfig
    params: Parameters
    step: int = 0
    training: dict = field(default_factory=dict)
    rng_state: dict | None = None
    optimizer: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def dumps(ckpt: Checkpoint) -> bytes:
    header = {
        "model": asdict(ckpt.model),
        "training": ckpt.training,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "optimizer": ckpt.optimizer,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(struct.pack("<I", len(hbytes)))
    body += hbytes
    for a in ckpt.params.arrays():
        body += np.ascontiguousarray(a, dtype="<f4").tobytes()
    return MAGIC + struct.pack("<I", ckpt.version) + bytes(body) + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CorruptChecksum("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version >> 16 != FORMAT_MAJOR:
        raise VersionMismatch(f"checkpoint format {version >> 16}.{version & 0xFFFF}, expected {FORMAT_MAJOR}.x")
    body, (crc,) = data[8:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptChecksum("checkpoint CRC-32 mismatch")

    (hlen,) = struct.unpack("<I", body[:4])
    header = json.loads(body[4:4 + hlen].decode("utf-8"))
    model = ModelConfig(**header["model"])
    arrays = []
    pos = 4 + hlen
    for shape in param_shapes(model):
        n = int(np.prod(shape))
        chunk = body[pos:pos + 4 * n]
        if len(chunk) != 4 * n:
            raise CorruptChecksum("tensor data shorter than the model config requires")
        arrays.append(np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(model.dtype))
        pos += 4 * n
    if pos != len(body):
        raise CorruptChecksum("trailing bytes after tensor data")
    return Checkpoint(
        model,
        Parameters.from_arrays(arrays),
        step=header["step"],
        training=header["training"],
        rng_state=header["rng_state"],
        optimizer=header["optimizer"],
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically so an interrupted save never clobbers a good file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(dumps(ckpt))
        os.replace(tmp, path)
    except OSError as e:
        raise IoFailure(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read checkpoint {path}: {e}") from e
    return loads(data)
