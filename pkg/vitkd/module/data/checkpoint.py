from dataclasses import dataclass, field
import logging
import os
from pathlib import Path
import struct
from typing import Any, Dict
import zlib

import numpy as np

from vitkd.util.errors import (ChecksumError, DataIOError, FormatError, TruncatedError,
                               UnsupportedVersionError)
from vitkd.util.export_utils import create_and_write, read_json

MAGIC = b"VKD1"
FAMILY = b"VKD"
VERSION = 1


@dataclass
class Checkpoint:
    """
    Named float32 tensor table plus the config echo of the run that produced it
    """

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    version: int = VERSION


def config_sidecar(path: str) -> Path:
    """
    :return: `<stem>.config.json` next to the checkpoint
    """
    path = Path(path)
    return path.with_name(F"{path.stem}.config.json")


def encode(ckpt: Checkpoint) -> bytes:
    """
    magic | u32 count | per tensor (u16 name length, name, u8 rank, u32 dims, f32 payload)
    | u32 CRC32 of everything before; all little-endian
    """
    chunks = [MAGIC, struct.pack("<I", len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        encoded_name = name.encode("utf-8")
        array = np.asarray(value, dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(F"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self._raw, self._path, self.offset = raw, path, 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self._raw):
            raise TruncatedError(F"{self._path}: truncated at byte {self.offset}, "
                                 F"{size} more bytes expected")
        chunk = self._raw[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(raw: bytes, path: str = "<bytes>") -> Dict[str, np.ndarray]:
    """
    Parse a VKD1 byte string, checking magic, structure and CRC
    :return: tensor table in stored order
    """
    if len(raw) < 4:
        raise TruncatedError(F"{path}: {len(raw)} bytes, no magic")
    magic = raw[:4]
    if magic != MAGIC:
        if magic[:3] == FAMILY:
            raise UnsupportedVersionError(F"{path}: checkpoint version {magic!r} "
                                          F"is not supported (expected {MAGIC!r})")
        raise FormatError(F"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise TruncatedError(F"{path}: {len(raw)} bytes, shorter than header and checksum")
    body, stored = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    computed = zlib.crc32(body)
    if stored != computed:
        raise ChecksumError(F"{path}: CRC32 mismatch, stored 0x{stored:08X}, "
                            F"computed 0x{computed:08X}")
    reader = _Reader(body, path)
    reader.take(4)
    count, = reader.unpack("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name_length, = reader.unpack("<H")
        try:
            name = reader.take(name_length).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(F"{path}: tensor name is not UTF-8") from None
        rank, = reader.unpack("<B")
        shape = reader.unpack(F"<{rank}I")
        payload = reader.take(4 * int(np.prod(shape)))
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if reader.offset != len(body):
        raise FormatError(F"{path}: {len(body) - reader.offset} trailing bytes after "
                          F"{count} tensors")
    return tensors


def checkpoint_save(ckpt: Checkpoint, path: str) -> None:
    """
    Write the binary table and, when there is a config echo, its JSON sidecar
    :param ckpt: checkpoint to persist
    :param path: target .vkd1 file
    """
    raw = encode(ckpt)
    parent = os.path.dirname(str(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fout:
        fout.write(raw)
    if ckpt.config:
        create_and_write(ckpt.config, str(config_sidecar(path)))


def checkpoint_load(path: str) -> Checkpoint:
    """
    :param path: .vkd1 file
    :return: tensors and (when present) the config echo from the sidecar
    """
    try:
        with open(path, "rb") as fin:
            raw = fin.read()
    except OSError as error:
        raise DataIOError(F"cannot read checkpoint {path}: {error.strerror or error}") \
            from error
    tensors = decode(raw, str(path))
    sidecar = config_sidecar(path)
    config: Dict[str, Any] = {}
    if sidecar.exists():
        config = read_json(str(sidecar))
    else:
        logging.warning("Checkpoint %s has no config sidecar %s", path, sidecar)
    return Checkpoint(tensors=tensors, config=config)
