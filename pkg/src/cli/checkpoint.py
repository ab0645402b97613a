"""Binary checkpoints for adapters (``PSLR``) and dense weights (``PSLW``).

All integers are little-endian u32 and all matrices little-endian float32,
row-major. Both formats end with a u32 CRC-32 of every preceding byte.

Adapter layout::

    "PSLR" | version | count | per adapter:
        task_index | len(layer_id) | layer_id (UTF-8) | d | k | r | A (d*r) | B (r*k)

Weights layout::

    "PSLW" | version | len(activation) | activation | layer count | per layer:
        len(layer_id) | layer_id | d | k | W (d*k) | bias (k)
"""
from __future__ import annotations

import logging
import struct
import zlib
from pathlib import Path
from typing import List, Sequence

import numpy as np

from src.lora.adapter import LoraAdapter
from src.lora.model import BaseModel, DenseLayer
from src.nn.tape import Matrix
from src.shared.errors import CheckpointError, PSLoraError
from src.shared.io import ensure_parent, require_files

LOGGER = logging.getLogger(__name__)

ADAPTER_MAGIC = b"PSLR"
WEIGHTS_MAGIC = b"PSLW"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")


class _Writer:
    def __init__(self, magic: bytes) -> None:
        self.parts: List[bytes] = [magic, _U32.pack(FORMAT_VERSION)]

    def u32(self, value: int) -> None:
        self.parts.append(_U32.pack(value))

    def text(self, value: str) -> None:
        raw = value.encode("utf-8")
        self.u32(len(raw))
        self.parts.append(raw)

    def matrix(self, m: Matrix) -> None:
        self.parts.append(np.ascontiguousarray(m.data, dtype="<f4").tobytes())

    def finish(self) -> bytes:
        body = b"".join(self.parts)
        return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes, magic: bytes) -> None:
        self.data = data
        self.offset = 0
        if len(data) < 12:
            raise CheckpointError("file too short for a checkpoint header", offset=len(data))
        if self.take(4) != magic:
            raise CheckpointError(f"bad magic, expected {magic!r}", offset=0)
        version = self.u32()
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}", offset=4)

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data) - 4:
            raise CheckpointError(f"truncated: need {n} bytes", offset=self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def text(self) -> str:
        start = self.offset
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("invalid UTF-8 in identifier", offset=start) from None

    def matrix(self, rows: int, cols: int) -> Matrix:
        start = self.offset
        values = np.frombuffer(self.take(4 * rows * cols), dtype="<f4").reshape(rows, cols)
        if not np.all(np.isfinite(values)):
            raise CheckpointError("non-finite value in matrix data", offset=start)
        return Matrix(values.astype(np.float32))

    def finish(self) -> None:
        if self.offset != len(self.data) - 4:
            raise CheckpointError(f"{len(self.data) - 4 - self.offset} trailing bytes", offset=self.offset)
        expected = _U32.unpack(self.data[-4:])[0]
        if zlib.crc32(self.data[:-4]) & 0xFFFFFFFF != expected:
            raise CheckpointError("checksum mismatch, file is corrupt", offset=len(self.data) - 4)


def encode_adapters(adapters: Sequence[LoraAdapter]) -> bytes:
    writer = _Writer(ADAPTER_MAGIC)
    writer.u32(len(adapters))
    for adapter in adapters:
        d, k = adapter.dims
        writer.u32(adapter.task_index)
        writer.text(adapter.layer_id)
        writer.u32(d)
        writer.u32(k)
        writer.u32(adapter.rank)
        writer.matrix(adapter.A)
        writer.matrix(adapter.B)
    return writer.finish()


def decode_adapters(data: bytes) -> List[LoraAdapter]:
    reader = _Reader(data, ADAPTER_MAGIC)
    adapters = []
    for _ in range(reader.u32()):
        start = reader.offset
        task_index = reader.u32()
        layer_id = reader.text()
        d, k, r = reader.u32(), reader.u32(), reader.u32()
        if min(d, k, r) == 0 or r > min(d, k):
            raise CheckpointError(f"invalid adapter dims d={d} k={k} r={r}", offset=start)
        A = reader.matrix(d, r)
        B = reader.matrix(r, k)
        adapters.append(LoraAdapter(task_index=task_index, layer_id=layer_id, A=A, B=B))
    reader.finish()
    return adapters


def encode_weights(model: BaseModel) -> bytes:
    writer = _Writer(WEIGHTS_MAGIC)
    writer.text(model.activation)
    writer.u32(len(model.layers))
    for layer in model.layers:
        d, k = layer.dims
        writer.text(layer.layer_id)
        writer.u32(d)
        writer.u32(k)
        writer.matrix(layer.weight)
        writer.matrix(layer.bias)
    return writer.finish()


def decode_weights(data: bytes) -> BaseModel:
    reader = _Reader(data, WEIGHTS_MAGIC)
    activation = reader.text()
    layers = []
    for _ in range(reader.u32()):
        layer_id = reader.text()
        start = reader.offset
        d, k = reader.u32(), reader.u32()
        if d == 0 or k == 0:
            raise CheckpointError(f"invalid layer dims {d}x{k}", offset=start)
        layers.append(DenseLayer(layer_id=layer_id, weight=reader.matrix(d, k), bias=reader.matrix(1, k)))
    reader.finish()
    if not layers:
        raise CheckpointError("weights checkpoint holds no layers", offset=len(data) - 4)
    return BaseModel(layers=tuple(layers), activation=activation)


def _write(path: Path, payload: bytes) -> Path:
    ensure_parent(path)
    path.write_bytes(payload)
    LOGGER.info("Wrote %s (%d bytes)", path, len(payload))
    return path


def _read(path: Path, decode):
    require_files([path])
    data = path.read_bytes()
    try:
        return decode(data)
    except CheckpointError as exc:
        wrapped = CheckpointError(f"{path}: {exc}")
        wrapped.offset = exc.offset
        raise wrapped from exc
    except PSLoraError as exc:
        raise CheckpointError(f"{path}: inconsistent contents ({exc})") from exc


def write_adapters(path: Path, adapters: Sequence[LoraAdapter]) -> Path:
    return _write(path, encode_adapters(adapters))


def read_adapters(path: Path) -> List[LoraAdapter]:
    return _read(path, decode_adapters)


def write_weights(path: Path, model: BaseModel) -> Path:
    return _write(path, encode_weights(model))


def read_weights(path: Path) -> BaseModel:
    return _read(path, decode_weights)


__all__ = [
    "ADAPTER_MAGIC",
    "FORMAT_VERSION",
    "WEIGHTS_MAGIC",
    "decode_adapters",
    "decode_weights",
    "encode_adapters",
    "encode_weights",
    "read_adapters",
    "read_weights",
    "write_adapters",
    "write_weights",
]
