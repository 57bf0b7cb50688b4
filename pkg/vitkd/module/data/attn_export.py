import os
from typing import Tuple, Union

import numpy as np

from vitkd.module.tensor.tensor import Tensor
from vitkd.util.errors import FormatError, ShapeError


def attention_pixels(matrix: np.ndarray) -> np.ndarray:
    """
    8-bit rendering normalized by the global max: pixel = round(255 v / max(v)),
    all zeros when the max is 0
    """
    peak = float(matrix.max()) if matrix.size else 0.0
    if peak <= 0.0:
        return np.zeros(matrix.shape, dtype=np.uint8)
    return np.clip(np.rint(255.0 * matrix / peak), 0, 255).astype(np.uint8)


def attn_export(avg: Union[Tensor, np.ndarray], path_prefix: str) -> Tuple[str, str]:
    """
    Write an averaged attention map as `<prefix>.csv` (row-major, 6 decimals) and
    `<prefix>.pgm` (binary 8-bit grayscale)
    :param avg: square (N+1)x(N+1) matrix
    :param path_prefix: output path without extension
    :return: written CSV and PGM paths
    """
    matrix = np.asarray(avg.data if isinstance(avg, Tensor) else avg, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ShapeError(F"attention export expects a square matrix, got {matrix.shape}")
    parent = os.path.dirname(str(path_prefix))
    if parent:
        os.makedirs(parent, exist_ok=True)
    csv_path, pgm_path = F"{path_prefix}.csv", F"{path_prefix}.pgm"
    np.savetxt(csv_path, matrix, fmt="%.6f", delimiter=",")
    pixels = attention_pixels(matrix)
    height, width = pixels.shape
    with open(pgm_path, "wb") as fout:
        fout.write(F"P5\n{width} {height}\n255\n".encode("ascii"))
        fout.write(pixels.tobytes())
    return csv_path, pgm_path


def read_pgm(path: str) -> np.ndarray:
    """
    :return: pixels of a binary PGM written by `attn_export`
    """
    with open(path, "rb") as fin:
        raw = fin.read()
    magic, dims, maxval, payload = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise FormatError(F"{path}: not an 8-bit binary PGM")
    width, height = (int(value) for value in dims.split())
    return np.frombuffer(payload, dtype=np.uint8, count=width * height).reshape(height, width)
