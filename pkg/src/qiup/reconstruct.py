"""Per-pixel fringe fits: frame stacks to mean, visibility, phase and transmission maps.

Each pixel follows ``I_k = A + B cos(phi_k + delta)`` over the reference
phases of the axial scan. Writing the model as
``A + (B cos delta) cos phi_k + (-B sin delta) sin phi_k`` makes it linear, so
all pixels are solved at once by one least-squares problem with many
right-hand sides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ManifestError, NoFWHMError, ReconstructionError
from .interferometer import (
    FrameStack,
    _write_manifest,
    read_manifest,
    setup_from_section,
    setup_to_section,
)
from .optics import SpdcSetup
from .raster import Raster, read_f32, wrap_phase, write_f32

RECON_MAGIC = "QIUPRECON1"
DEFAULT_MEAN_FLOOR = 5.0
DEFAULT_VISIBILITY_FLOOR = 0.02

_MAP_FILES = {
    "mean_map": "mean.f32",
    "visibility_map": "visibility.f32",
    "phase_map": "phase.f32",
    "residual_map": "residual.f32",
}


@dataclass
class ReconMaps:
    """Reconstruction products; all maps are ``(height, width)`` arrays.

    ``valid`` is False where the fringe mean fell below ``mean_floor`` (and,
    once a reference is applied, where the reference was floored); such
    pixels carry ``V = 0`` and ``delta = 0``.
    """

    mean_map: np.ndarray
    visibility_map: np.ndarray
    phase_map: np.ndarray
    residual_map: np.ndarray
    valid: np.ndarray
    pixel_pitch: float
    transmission_map: np.ndarray | None = None
    clamp_count: int = 0
    mean_floor: float = DEFAULT_MEAN_FLOOR
    setup: SpdcSetup | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mean_map.shape

    def select(self, name: str) -> np.ndarray:
        """Map by short name: ``mean``, ``visibility``, ``phase``, ``transmission`` or ``residual``."""
        if name == "transmission":
            if self.transmission_map is None:
                raise ValueError("no transmission map; divide by a reference first")
            return self.transmission_map
        try:
            return getattr(self, f"{name}_map")
        except AttributeError:
            raise ValueError(f"unknown map {name!r}") from None

    def with_transmission(self, transmission: np.ma.MaskedArray) -> "ReconMaps":
        mask = np.ma.getmaskarray(transmission)
        return replace(
            self,
            transmission_map=np.ma.getdata(transmission).copy(),
            valid=self.valid & ~mask,
        )


def design_matrix(phases) -> np.ndarray:
    phases = np.asarray(phases, dtype=float)
    return np.column_stack([np.ones_like(phases), np.cos(phases), np.sin(phases)])


def _check_phases(phases: np.ndarray) -> np.ndarray:
    distinct = np.unique(phases)
    if distinct.size < 3 or np.linalg.matrix_rank(design_matrix(distinct)) < 3:
        raise ReconstructionError(
            "phase set is degenerate for a cosine fit (needs 3 phases distinct modulo 2 pi, "
            f"not all separated by pi): {', '.join(f'{p:.6g}' for p in distinct)}",
            phases=distinct,
        )
    return distinct


def _averaged(stack: FrameStack, distinct: np.ndarray) -> np.ndarray:
    return np.stack([stack.frames[stack.phase_of_frame == p].mean(axis=0) for p in distinct])


def reconstruct_stack(
    stack: FrameStack,
    averaging: bool = True,
    mean_floor: float = DEFAULT_MEAN_FLOOR,
    method: str = "fit",
    phase_offset: str = "known",
) -> ReconMaps:
    """Invert a phase-stepped stack into per-pixel fringe parameters.

    Parameters
    ----------
    stack : FrameStack
    averaging : bool
        Average frames sharing a reference phase before fitting. The point
        estimate is unchanged for balanced stacks; the residual map then
        measures model error rather than shot noise.
    mean_floor : float
        Pixels with fitted mean below this many counts are marked invalid.
    method : {"fit", "extrema"}
        ``"fit"`` solves the cosine model by least squares. ``"extrema"``
        takes ``V = (max - min) / (max + min)`` over the phase-averaged
        frames and leaves the phase at zero; it needs no phase knowledge.
    phase_offset : {"known", "fit"}
        Trust the manifest phases absolutely, or remove a global phase
        offset (the amplitude-weighted circular mean over valid pixels) for
        scans whose steps are only known relative to each other.

    Raises
    ------
    ReconstructionError
        If the phase set cannot determine the three fringe parameters.
    """
    distinct = _check_phases(stack.phase_of_frame)
    height, width = stack.shape
    if averaging or method == "extrema":
        phases, data = distinct, _averaged(stack, distinct)
    else:
        phases, data = stack.phase_of_frame, stack.frames
    y = data.reshape(len(phases), -1)

    if method == "fit":
        design = design_matrix(phases)
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        mean, c_cos, c_sin = coef
        amp = np.hypot(c_cos, c_sin)
        delta = np.arctan2(-c_sin, c_cos)
        residual = np.sqrt(np.mean((y - design @ coef) ** 2, axis=0))
    elif method == "extrema":
        hi, lo = y.max(axis=0), y.min(axis=0)
        mean = y.mean(axis=0)
        total = hi + lo
        amp = np.divide(hi - lo, total, out=np.zeros_like(total), where=total > 0) * mean
        delta = np.zeros_like(mean)
        residual = np.zeros_like(mean)
    else:
        raise ValueError(f"unknown method {method!r}")

    valid = mean >= mean_floor
    visibility = np.divide(amp, mean, out=np.zeros_like(mean), where=valid)
    clamp_count = int(np.count_nonzero(valid & (visibility > 1.0)))
    visibility = np.clip(visibility, 0.0, 1.0)
    visibility[~valid] = 0.0
    delta[~valid] = 0.0

    if phase_offset == "fit" and method == "fit":
        weights = np.where(valid, amp, 0.0)
        offset = np.angle(np.sum(weights * np.exp(1j * delta)))
        delta = np.where(valid, delta - offset, 0.0)
    elif phase_offset not in ("known", "fit"):
        raise ValueError(f"unknown phase_offset mode {phase_offset!r}")

    shape = (height, width)
    return ReconMaps(
        mean_map=mean.reshape(shape),
        visibility_map=visibility.reshape(shape),
        phase_map=wrap_phase(delta).reshape(shape),
        residual_map=residual.reshape(shape),
        valid=valid.reshape(shape),
        pixel_pitch=stack.pixel_pitch,
        clamp_count=clamp_count,
        mean_floor=mean_floor,
        setup=stack.setup,
        provenance={"method": method, "averaging": averaging, "phase_offset": phase_offset},
    )


def transmission_from_reference(
    sample_maps: ReconMaps,
    reference_maps: ReconMaps,
    visibility_floor: float = DEFAULT_VISIBILITY_FLOOR,
) -> np.ma.MaskedArray:
    """Normalized transmission ``clip(V_sample / V_reference, 0, 1)``.

    Dividing by an empty-field reference removes the system visibility and
    its spatial structure. Pixels invalid in either map, or where the
    reference visibility is below ``visibility_floor``, are masked.
    """
    if sample_maps.shape != reference_maps.shape:
        raise ValueError(f"map shapes differ: {sample_maps.shape} vs {reference_maps.shape}")
    v_ref = reference_maps.visibility_map
    ok = sample_maps.valid & reference_maps.valid & (v_ref >= visibility_floor)
    ratio = np.divide(sample_maps.visibility_map, v_ref, out=np.zeros_like(v_ref), where=ok)
    return np.ma.MaskedArray(np.clip(ratio, 0.0, 1.0), mask=~ok)


def predicted_visibility_std(mean_counts, visibility, phases, delta=0.0):
    """Shot-noise standard deviation of the fitted visibility.

    First-order propagation of independent Poisson frame counts through the
    least-squares estimator, for frames at ``phases`` (one entry per frame)
    with expectation ``A (1 + V cos(phi + delta))``.
    """
    phases = np.asarray(phases, dtype=float)
    a = np.asarray(mean_counts, dtype=float)[..., None]
    v = np.asarray(visibility, dtype=float)[..., None]
    delta = np.asarray(delta, dtype=float)[..., None]
    proj = np.linalg.pinv(design_matrix(phases))
    expected = a * (1.0 + v * np.cos(phases + delta))
    b = a * v
    c_cos, c_sin = b * np.cos(delta), -b * np.sin(delta)
    grad = (c_cos * proj[1] + c_sin * proj[2]) / (b * a) - b * proj[0] / a**2
    return np.sqrt(np.sum(grad**2 * expected, axis=-1))


# --- effective mode counting ---------------------------------------------------------------


@dataclass(frozen=True)
class ModeCount:
    extent_x: float
    extent_y: float
    modes_x: float
    modes_y: float

    @property
    def total(self) -> float:
        return self.modes_x * self.modes_y


def profile_fwhm(profile, pitch: float = 1.0) -> float:
    """FWHM of a single-peaked profile by linear interpolation of the half-maximum crossings."""
    p = np.asarray(profile, dtype=float)
    if p.size < 3 or not np.all(np.isfinite(p)):
        raise NoFWHMError("profile too short or not finite")
    peak = int(np.argmax(p))
    half = p[peak] / 2.0
    if not p[peak] > 0:
        raise NoFWHMError("profile is empty")
    left = np.nonzero(p[:peak] < half)[0]
    right = np.nonzero(p[peak:] < half)[0]
    if left.size == 0 or right.size == 0:
        raise NoFWHMError("profile never drops below half maximum on both sides of its peak")
    i = left[-1]
    x_left = i + (half - p[i]) / (p[i + 1] - p[i])
    j = peak + right[0]
    x_right = j - 1 + (p[j - 1] - half) / (p[j - 1] - p[j])
    return (x_right - x_left) * pitch


def effective_modes(raster, resolution_fwhm: float, pixel_pitch: float | None = None) -> ModeCount:
    """Resolvable cells per axis: FWHM of the axis projection over the resolution.

    ``raster`` may be a :class:`~qiup.raster.Raster` or a bare array with
    ``pixel_pitch`` given. The product of the per-axis counts is
    :attr:`ModeCount.total`.
    """
    if isinstance(raster, Raster):
        values, pitch = raster.values, raster.pixel_pitch
    else:
        values, pitch = np.asarray(raster, dtype=float), pixel_pitch
        if pitch is None:
            raise ValueError("pixel_pitch is required for bare arrays")
    if np.any(values < 0):
        raise ValueError("raster must be non-negative")
    ex = profile_fwhm(values.sum(axis=0), pitch)
    ey = profile_fwhm(values.sum(axis=1), pitch)
    return ModeCount(ex, ey, ex / resolution_fwhm, ey / resolution_fwhm)


# --- on-disk maps -------------------------------------------------------------------------


def save_maps(maps: ReconMaps, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    height, width = maps.shape
    files = dict(_MAP_FILES)
    for attr, name in _MAP_FILES.items():
        write_f32(directory / name, getattr(maps, attr))
    write_f32(directory / "valid.f32", maps.valid.astype(float))
    files["valid"] = "valid.f32"
    if maps.transmission_map is not None:
        write_f32(directory / "transmission.f32", maps.transmission_map)
        files["transmission_map"] = "transmission.f32"
    sections = {
        "maps": {
            "width": str(width),
            "height": str(height),
            "pixel_pitch": repr(float(maps.pixel_pitch)),
            "mean_floor": repr(float(maps.mean_floor)),
            "clamp_count": str(maps.clamp_count),
            "valid_pixels": str(int(maps.valid.sum())),
        },
        "files": files,
        "provenance": {k: str(v) for k, v in {**maps.provenance, **(extra or {})}.items()},
    }
    if maps.setup is not None:
        sections["setup"] = setup_to_section(maps.setup)
    _write_manifest(directory / "recon_manifest", RECON_MAGIC, sections)
    return directory


def load_maps(directory) -> ReconMaps:
    directory = Path(directory)
    manifest = read_manifest(directory / "recon_manifest", RECON_MAGIC)
    if "maps" not in manifest or "files" not in manifest:
        raise ManifestError(f"{directory}/recon_manifest lacks [maps] or [files]", path=str(directory))
    info, files = manifest["maps"], manifest["files"]
    shape = (int(info["height"]), int(info["width"]))
    arrays = {}
    for attr in list(_MAP_FILES) + ["valid", "transmission_map"]:
        if attr in files:
            arrays[attr] = read_f32(directory / files[attr], shape)
        elif attr not in ("transmission_map",):
            raise ManifestError(f"{directory}/recon_manifest lists no file for {attr}", path=str(directory))
    setup = setup_from_section(manifest["setup"]) if "setup" in manifest else None
    return ReconMaps(
        mean_map=arrays["mean_map"],
        visibility_map=arrays["visibility_map"],
        phase_map=arrays["phase_map"],
        residual_map=arrays["residual_map"],
        valid=arrays["valid"] > 0.5,
        pixel_pitch=float(info["pixel_pitch"]),
        transmission_map=arrays.get("transmission_map"),
        clamp_count=int(info["clamp_count"]),
        mean_floor=float(info["mean_floor"]),
        setup=setup,
        provenance=dict(manifest["provenance"]) if "provenance" in manifest else {},
    )


def visibility_shot_noise_std(mean_counts, visibility, n_frames: int) -> np.ndarray:
    """Closed form of :func:`predicted_visibility_std` for uniform steps, ``K != 3``.

    ``sigma_V = sqrt((2 - V^2) / (n_frames * A))``
    """
    return np.sqrt((2.0 - np.asarray(visibility) ** 2) / (n_frames * np.asarray(mean_counts, dtype=float)))


def circular_rms(a, b) -> float:
    """RMS of the wrapped difference between two phase arrays."""
    d = wrap_phase(np.asarray(a) - np.asarray(b))
    return float(math.sqrt(np.mean(d**2))) if d.size else 0.0
