"""
SGNT checkpoint codec.

Layout (all integers little-endian):

    b"SGNT" | u32 format version | u32 manifest length | manifest JSON | blobs

The manifest records the model description (kind plus configs), one entry
per tensor (name, shape, byte offset into the blob section, byte length)
and training metadata. Blobs are float32 little-endian, row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, ValidationError

from errors import (
    BadMagicError,
    CheckpointError,
    ContractError,
    ShapeMismatchError,
    TruncatedBlobError,
    UnsupportedVersionError,
)
from network import TapeModel, build_model

log = structlog.get_logger()

MAGIC = b"SGNT"
FORMAT_VERSION = 1
BLOB_DTYPE = np.dtype("<f4")
_U32 = struct.Struct("<I")


class TensorEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    shape: List[int]
    offset: int
    length: int


class CheckpointManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: Dict[str, Any]
    tensors: List[TensorEntry]
    metadata: Dict[str, Any] = {}


@dataclass
class Checkpoint:
    model: Dict[str, Any]
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: TapeModel, **metadata: Any) -> "Checkpoint":
        tensors = {name: np.asarray(v, dtype=BLOB_DTYPE).copy() for name, v in model.state().items()}
        return cls(model=model.describe(), tensors=tensors, metadata={**model.metadata, **metadata})

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name, value in self.tensors.items():
            blob = np.ascontiguousarray(value, dtype=BLOB_DTYPE).tobytes()
            entries.append(TensorEntry(name=name, shape=list(np.shape(value)), offset=offset, length=len(blob)))
            blobs.append(blob)
            offset += len(blob)
        manifest = CheckpointManifest(model=self.model, tensors=entries, metadata=self.metadata)
        text = manifest.model_dump_json().encode("utf-8")
        return b"".join([MAGIC, _U32.pack(self.version), _U32.pack(len(text)), text, *blobs])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
        if len(data) < 12:
            raise TruncatedBlobError("header is truncated")
        (version,) = _U32.unpack_from(data, 4)
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"format version {version} is not supported (expected {FORMAT_VERSION})")
        (size,) = _U32.unpack_from(data, 8)
        if 12 + size > len(data):
            raise TruncatedBlobError(f"manifest declares {size} bytes, only {len(data) - 12} present")
        try:
            manifest = CheckpointManifest.model_validate_json(data[12:12 + size])
        except ValidationError as exc:
            raise CheckpointError(f"malformed manifest: {exc}") from exc
        blobs = memoryview(data)[12 + size:]
        tensors: Dict[str, np.ndarray] = {}
        for entry in manifest.tensors:
            expected = int(np.prod(entry.shape)) * BLOB_DTYPE.itemsize
            if entry.length != expected:
                raise ShapeMismatchError(
                    f"{entry.name}: shape {tuple(entry.shape)} needs {expected // BLOB_DTYPE.itemsize} "
                    f"floats, blob holds {entry.length / BLOB_DTYPE.itemsize:g}"
                )
            if entry.offset < 0 or entry.offset + entry.length > len(blobs):
                raise TruncatedBlobError(f"{entry.name}: blob ends past the end of the file")
            chunk = blobs[entry.offset:entry.offset + entry.length]
            tensors[entry.name] = np.frombuffer(chunk, dtype=BLOB_DTYPE).reshape(entry.shape).copy()
        return cls(model=manifest.model, tensors=tensors, metadata=manifest.metadata, version=version)

    def restore(self, dtype: Any = np.float32) -> TapeModel:
        """Model described by this checkpoint, with its tensors loaded."""
        try:
            model = build_model(self.model, dtype=dtype)
            model.load_state(self.tensors)
        except ContractError as exc:
            raise ShapeMismatchError(str(exc)) from exc
        model.metadata = dict(self.metadata)
        return model


def save_checkpoint(model: Union[TapeModel, Checkpoint], path: Union[str, Path], **metadata: Any) -> Path:
    ckpt = model if isinstance(model, Checkpoint) else Checkpoint.from_model(model, **metadata)
    path = Path(path)
    path.write_bytes(ckpt.to_bytes())
    log.info("checkpoint saved", path=str(path), tensors=len(ckpt.tensors))
    return path


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def load_checkpoint(path: Union[str, Path], dtype: Any = np.float32) -> TapeModel:
    model = read_checkpoint(path).restore(dtype)
    log.info("checkpoint loaded", path=str(path), kind=model.kind)
    return model
