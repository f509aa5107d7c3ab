"""Raster carrier and the raw f32 / 16-bit PGM file helpers used by every module."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

F32 = np.dtype("<f4")


@dataclass(frozen=True)
class Raster:
    """A 2D grid of non-negative values with a physical pixel pitch (m)."""

    values: np.ndarray
    pixel_pitch: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError(f"raster must be 2D, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("raster values must be finite and non-negative")
        if not self.pixel_pitch > 0:
            raise ValueError("pixel_pitch must be positive")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def pixel_centers(n: int, pitch: float) -> np.ndarray:
    """Coordinates of pixel centers, ``(j + 1/2) * pitch``."""
    return (np.arange(n) + 0.5) * pitch


def write_f32(path, array) -> None:
    """Write ``array`` as row-major little-endian float32 without a header."""
    np.ascontiguousarray(array, dtype=F32).tofile(path)


def read_f32(path, shape: tuple[int, ...]) -> np.ndarray:
    """Read a headerless float32 raster of known ``shape`` as float64."""
    expected = int(np.prod(shape)) * F32.itemsize
    try:
        size = os.path.getsize(path)
    except OSError as exc:
        raise FormatError(f"cannot read raster {path}: {exc}", path=str(path)) from exc
    if size != expected:
        missing = expected - size
        raise FormatError(
            f"{path}: expected {expected} bytes for shape {shape}, found {size}"
            + (f" ({missing} bytes missing)" if missing > 0 else ""),
            path=str(path),
            missing_bytes=max(missing, 0),
        )
    return np.fromfile(path, dtype=F32).astype(float).reshape(shape)


def export_pgm(path, array, value_range: tuple[float, float] | None = None) -> tuple[float, float]:
    """Export ``array`` as a 16-bit binary PGM scaled to the full 0..65535 range.

    The mapping ``value = lo + code * (hi - lo) / 65535`` is written to the
    sidecar text file ``<path>.scale``. Non-finite values map to code 0.

    Returns
    -------
    (lo, hi) : tuple of float
    """
    data = np.asarray(array, dtype=float)
    finite = np.isfinite(data)
    if value_range is None:
        lo = float(data[finite].min()) if finite.any() else 0.0
        hi = float(data[finite].max()) if finite.any() else 0.0
    else:
        lo, hi = map(float, value_range)
    span = hi - lo
    if span > 0:
        scaled = np.clip((np.where(finite, data, lo) - lo) / span, 0.0, 1.0) * 65535.0
    else:
        scaled = np.zeros_like(data)
    codes = np.rint(scaled).astype(">u2")
    height, width = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n65535\n".encode("ascii"))
        fh.write(codes.tobytes())
    with open(f"{path}.scale", "w") as fh:
        fh.write(f"min = {lo!r}\nmax = {hi!r}\nmaxval = 65535\n")
    return lo, hi


def read_pgm(path) -> np.ndarray:
    """Read a 16-bit PGM written by :func:`export_pgm` and undo its scaling."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5" or tokens[3] != "65535":
        raise FormatError(f"{path}: not a 16-bit binary PGM", path=str(path))
    width, height = int(tokens[1]), int(tokens[2])
    codes = np.frombuffer(raw[pos:], dtype=">u2")
    if codes.size != width * height:
        raise FormatError(f"{path}: truncated PGM payload", path=str(path),
                          missing_bytes=2 * (width * height - codes.size))
    scale = {}
    with open(f"{path}.scale") as fh:
        for line in fh:
            key, _, value = line.partition("=")
            scale[key.strip()] = float(value)
    lo, hi = scale["min"], scale["max"]
    return lo + codes.reshape(height, width).astype(float) * (hi - lo) / 65535.0


def wrap_phase(phase):
    """Wrap radians into (-pi, pi]."""
    wrapped = np.mod(np.asarray(phase, dtype=float) + math.pi, 2 * math.pi) - math.pi
    return np.where(wrapped == -math.pi, math.pi, wrapped)
