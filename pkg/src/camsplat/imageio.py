"""16-bit PNG read/write for linear-radiance images."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import png

MAX16 = 65535


class ImageDecodeError(IOError):
    pass


def quantize(values: np.ndarray, v_max: float = 1.0) -> np.ndarray:
    return np.round(np.clip(np.asarray(values, float) / v_max, 0.0, 1.0) * MAX16).astype(np.uint16)


def write_png16(path: str | Path, values: np.ndarray, v_max: float = 1.0) -> None:
    """Write an H x W (gray) or H x W x 3 (RGB) array mapped linearly from [0, v_max]."""
    q = quantize(values, v_max)
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[..., 0]
    h, w = q.shape[:2]
    grey = q.ndim == 2
    writer = png.Writer(w, h, greyscale=grey, bitdepth=16)
    with open(path, "wb") as fh:
        writer.write(fh, q.reshape(h, -1))


def read_png16(path: str | Path, v_max: float = 1.0) -> np.ndarray:
    try:
        width, height, rows, info = png.Reader(filename=str(path)).read()
        arr = np.vstack([np.asarray(r, dtype=np.uint16) for r in rows])
    except (png.Error, OSError, ValueError, EOFError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    planes = info["planes"]
    if planes > 1:
        arr = arr.reshape(height, width, planes)
    scale = (2 ** info["bitdepth"]) - 1
    return arr.astype(float) / scale * v_max
