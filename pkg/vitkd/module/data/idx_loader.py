import logging
import struct
from typing import Tuple

import numpy as np

from vitkd.module.data.dataset import Dataset
from vitkd.util.errors import CountError, DataIOError, FormatError, TruncatedError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as fin:
            return fin.read()
    except OSError as error:
        raise DataIOError(F"cannot read IDX file {path}: {error.strerror or error}") from error


def _parse(raw: bytes, path: str, magic: int, rank: int) -> Tuple[Tuple[int, ...], np.ndarray]:
    """
    :return: dims from the header and the uint8 payload
    """
    header_size = 4 + 4 * rank
    if len(raw) < 4:
        raise TruncatedError(F"{path}: {len(raw)} bytes, no IDX magic")
    found, = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(F"{path}: bad magic 0x{found:08X}, expected 0x{magic:08X}")
    if len(raw) < header_size:
        raise TruncatedError(F"{path}: header needs {header_size} bytes, file has {len(raw)}")
    dims = struct.unpack(F">{rank}I", raw[4:header_size])
    expected = int(np.prod(dims))
    if len(raw) - header_size < expected:
        raise TruncatedError(F"{path}: header promises {expected} payload bytes, "
                             F"found {len(raw) - header_size}")
    payload = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_size)
    return dims, payload.reshape(dims)


def _fit(pixels: np.ndarray, size: int) -> np.ndarray:
    """
    Symmetric zero pad (extra pixel after) or centered crop of both spatial axes
    """
    for axis in (1, 2):
        length = pixels.shape[axis]
        if length < size:
            before = (size - length) // 2
            widths = [(0, 0)] * 3
            widths[axis] = (before, size - length - before)
            pixels = np.pad(pixels, widths)
        elif length > size:
            start = (length - size) // 2
            pixels = np.take(pixels, np.arange(start, start + size), axis=axis)
    return pixels


def idx_load(images_path: str, labels_path: str, image_size: int = 32,
             split: str = "train", num_classes: int = 10) -> Dataset:
    """
    Load an IDX image file (magic 0x00000803, dims n, rows, cols) with its IDX label
    file (magic 0x00000801, dim n), both big-endian. Grayscale is replicated to three
    channels, scaled to [0, 1] and padded or cropped to image_size
    :param images_path: image file
    :param labels_path: label file
    :param image_size: target side
    :param split: split tag
    :param num_classes: labels must lie below this
    """
    image_dims, pixels = _parse(_read_bytes(images_path), images_path, IMAGES_MAGIC, 3)
    label_dims, labels = _parse(_read_bytes(labels_path), labels_path, LABELS_MAGIC, 1)
    if image_dims[0] != label_dims[0]:
        raise CountError(F"{images_path} has {image_dims[0]} images, "
                         F"{labels_path} has {label_dims[0]} labels")
    if labels.size and int(labels.max()) >= num_classes:
        raise FormatError(F"{labels_path}: label {int(labels.max())} outside "
                          F"[0, {num_classes})")
    if max(image_dims[1:]) > image_size:
        logging.warning("IDX images %dx%d are cropped to %d", image_dims[1], image_dims[2],
                        image_size)
    fitted = _fit(pixels.astype(np.float32) / 255.0, image_size)
    images = np.repeat(fitted[:, None], 3, axis=1)
    return Dataset(images=np.ascontiguousarray(images), labels=labels.astype(np.int64),
                   split=split, num_classes=num_classes)
