"""Complex samples (amplitude transmission + phase) and synthetic phantoms.

Pixel ``j`` along an axis has its center at ``(j + 1/2) * pixel_pitch``. A
feature boundary at coordinate ``c`` gives pixels whose center lies below
``c`` the "left" value; edge fits are sensitive to half-pixel offsets, so the
convention is fixed here and nowhere else.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import FormatError
from .raster import F32, pixel_centers, wrap_phase

SAMPLE_MAGIC = "QIUPSAMPLE1"
# float32(pi) rounds above pi; allow that much slack when validating phases
_PHASE_SLACK = 1e-6


@dataclass(frozen=True)
class ComplexSample:
    """Thin object with amplitude transmission in [0, 1] and phase in (-pi, pi].

    Arrays are ``(height, width)`` float64 grids.
    """

    amplitude: np.ndarray
    phase: np.ndarray
    pixel_pitch: float

    def __post_init__(self):
        amplitude = np.asarray(self.amplitude, dtype=float)
        phase = np.asarray(self.phase, dtype=float)
        if amplitude.ndim != 2 or amplitude.shape != phase.shape:
            raise ValueError(f"amplitude {amplitude.shape} and phase {phase.shape} must be equal 2D grids")
        if not (math.isfinite(self.pixel_pitch) and self.pixel_pitch > 0):
            raise ValueError(f"pixel_pitch must be positive, got {self.pixel_pitch!r}")
        if not np.all(np.isfinite(amplitude)) or amplitude.min() < 0 or amplitude.max() > 1:
            raise ValueError("amplitude must lie within [0, 1]")
        if not np.all(np.isfinite(phase)) or np.abs(phase).max() > math.pi + _PHASE_SLACK:
            raise ValueError("phase must be wrapped to (-pi, pi]")
        object.__setattr__(self, "amplitude", amplitude)
        object.__setattr__(self, "phase", phase)

    @property
    def shape(self) -> tuple[int, int]:
        return self.amplitude.shape

    @property
    def height(self) -> int:
        return self.amplitude.shape[0]

    @property
    def width(self) -> int:
        return self.amplitude.shape[1]

    @property
    def field(self) -> np.ndarray:
        return self.amplitude * np.exp(1j * self.phase)

    @classmethod
    def from_field(cls, field: np.ndarray, pixel_pitch: float) -> "ComplexSample":
        amplitude = np.clip(np.abs(field), 0.0, 1.0)
        return cls(amplitude, wrap_phase(np.angle(field)), pixel_pitch)

    def crop(self, x0: int, y0: int, width: int, height: int) -> "ComplexSample":
        if x0 < 0 or y0 < 0 or x0 + width > self.width or y0 + height > self.height:
            raise ValueError("crop window exceeds the sample")
        window = np.s_[y0 : y0 + height, x0 : x0 + width]
        return ComplexSample(self.amplitude[window], self.phase[window], self.pixel_pitch)


def _coords(width: int, height: int, pixel_pitch: float):
    return pixel_centers(width, pixel_pitch), pixel_centers(height, pixel_pitch)


def empty_sample(width: int, height: int, pixel_pitch: float) -> ComplexSample:
    return uniform_sample(width, height, pixel_pitch, 1.0)


def uniform_sample(width: int, height: int, pixel_pitch: float, transmission: float, phase: float = 0.0) -> ComplexSample:
    shape = (height, width)
    return ComplexSample(np.full(shape, float(transmission)), np.full(shape, float(wrap_phase(phase))), pixel_pitch)


def phantom_knife_edge(
    width: int, height: int, pixel_pitch: float, edge_position: float, orientation: str = "x"
) -> ComplexSample:
    """Opaque half-plane: transparent below ``edge_position``, opaque above.

    ``orientation`` names the axis normal to the edge, so ``"x"`` is a vertical
    edge and the amplitude varies column to column.
    """
    if orientation not in ("x", "y"):
        raise ValueError(f"orientation must be 'x' or 'y', got {orientation!r}")
    n = width if orientation == "x" else height
    if not 0 < edge_position < n * pixel_pitch:
        raise ValueError(f"edge position {edge_position!r} lies outside the {n * pixel_pitch!r} m grid")
    profile = (pixel_centers(n, pixel_pitch) < edge_position).astype(float)
    amplitude = np.broadcast_to(profile, (height, width)) if orientation == "x" else np.broadcast_to(profile[:, None], (height, width))
    return ComplexSample(amplitude.copy(), np.zeros((height, width)), pixel_pitch)


def phantom_bars(
    width: int, height: int, pixel_pitch: float, bar_period: float, duty: float, orientation: str = "x"
) -> ComplexSample:
    """Binary line grating; ``duty`` is the opaque fraction of each period."""
    if bar_period < 2 * pixel_pitch * (1 - 1e-12):
        raise ValueError(f"bar period {bar_period!r} is below the two-pixel sampling limit")
    if not 0 <= duty <= 1:
        raise ValueError("duty must lie in [0, 1]")
    if orientation not in ("x", "y"):
        raise ValueError(f"orientation must be 'x' or 'y', got {orientation!r}")
    n = width if orientation == "x" else height
    # opaque where the center falls in [0, duty*period) of its period
    opaque = np.mod(pixel_centers(n, pixel_pitch), bar_period) < duty * bar_period
    profile = np.where(opaque, 0.0, 1.0)
    if orientation == "x":
        amplitude = np.broadcast_to(profile, (height, width))
    else:
        amplitude = np.broadcast_to(profile[:, None], (height, width))
    return ComplexSample(amplitude.copy(), np.zeros((height, width)), pixel_pitch)


def phantom_phase_disk(
    width: int,
    height: int,
    pixel_pitch: float,
    radius: float,
    phase_shift: float,
    center: tuple[float, float] | None = None,
) -> ComplexSample:
    """Transparent pure-phase disk, ``phase_shift`` inside, unit amplitude everywhere."""
    x, y = _coords(width, height, pixel_pitch)
    cx, cy = center if center is not None else (width * pixel_pitch / 2, height * pixel_pitch / 2)
    if radius <= 0 or min(cx, cy) < radius or cx + radius > width * pixel_pitch or cy + radius > height * pixel_pitch:
        raise ValueError(f"disk of radius {radius!r} does not fit in the grid")
    inside = (x[None, :] - cx) ** 2 + (y[:, None] - cy) ** 2 < radius**2
    phase = np.where(inside, float(wrap_phase(phase_shift)), 0.0)
    return ComplexSample(np.ones((height, width)), phase, pixel_pitch)


def phantom_points(
    width: int, height: int, pixel_pitch: float, positions: list[tuple[float, float]]
) -> ComplexSample:
    """Opaque background with single transparent pixels at ``positions`` (m)."""
    amplitude = np.zeros((height, width))
    for px, py in positions:
        amplitude[int(py // pixel_pitch), int(px // pixel_pitch)] = 1.0
    return ComplexSample(amplitude, np.zeros_like(amplitude), pixel_pitch)


def phantom_texture(
    width: int,
    height: int,
    pixel_pitch: float,
    feature_size: float,
    seed: int = 0,
    amplitude_range: tuple[float, float] = (0.2, 1.0),
    phase_range: float = 0.0,
) -> ComplexSample:
    """Smooth random absorber for stitching and registration tests.

    White noise filtered by a Gaussian of std ``feature_size`` and rescaled
    to ``amplitude_range``; an optional independent phase texture spans
    ``[-phase_range, phase_range]``.
    """
    rng = np.random.default_rng(seed)
    sigma_px = feature_size / pixel_pitch

    def smooth():
        field = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma_px, mode="wrap")
        return (field - field.min()) / (np.ptp(field) or 1.0)

    lo, hi = amplitude_range
    amplitude = lo + (hi - lo) * smooth()
    phase = (2 * smooth() - 1) * phase_range if phase_range else np.zeros((height, width))
    return ComplexSample(np.clip(amplitude, 0, 1), wrap_phase(phase), pixel_pitch)


def save_sample(sample: ComplexSample, path) -> None:
    """Write the text header then float32 amplitude and phase, row-major little-endian.

    Values are stored at float32 precision; float32-representable samples
    round-trip exactly.
    """
    header = f"{SAMPLE_MAGIC}\n{sample.width}\n{sample.height}\n{sample.pixel_pitch!r}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(sample.amplitude, dtype=F32).tobytes())
        fh.write(np.ascontiguousarray(sample.phase, dtype=F32).tobytes())


def load_sample(path) -> ComplexSample:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = []
    pos = 0
    for _ in range(4):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: header truncated after {len(lines)} lines", path=path)
        lines.append(raw[pos:end].decode("ascii", errors="replace").strip())
        pos = end + 1
    if lines[0] != SAMPLE_MAGIC:
        raise FormatError(f"{path}: bad magic {lines[0]!r}, expected {SAMPLE_MAGIC}", path=path)
    try:
        width, height, pitch = int(lines[1]), int(lines[2]), float(lines[3])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header ({exc})", path=path) from exc
    if width <= 0 or height <= 0 or not pitch > 0:
        raise FormatError(f"{path}: non-positive dimensions or pitch in header", path=path)
    n = width * height
    expected = 2 * n * F32.itemsize
    payload = raw[pos:]
    if len(payload) < expected:
        missing = expected - len(payload)
        raise FormatError(f"{path}: payload truncated, {missing} bytes missing", path=path, missing_bytes=missing)
    if len(payload) > expected:
        raise FormatError(
            f"{path}: dimension mismatch, {len(payload) - expected} bytes beyond a {width}x{height} payload",
            path=path,
        )
    data = np.frombuffer(payload, dtype=F32).astype(float)
    amplitude = data[:n].reshape(height, width)
    phase = data[n:].reshape(height, width)
    if amplitude.min() < 0 or amplitude.max() > 1:
        raise FormatError(
            f"{path}: amplitude out of range [0, 1] (min {amplitude.min():g}, max {amplitude.max():g})", path=path
        )
    try:
        return ComplexSample(amplitude, phase, pitch)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}", path=path) from exc
