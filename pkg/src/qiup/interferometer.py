"""Image-plane forward model of the nonlinear interferometer.

The camera sees the signal photons in the image plane of the crystal. Their
count rate is the pump birth-zone envelope times a two-beam interference term
whose contrast and phase carry the (PSF-blurred) transmission and phase the
undetected idler picked up at the sample:

    N(x) = rate * exposure * E(x) * (1 + V_eff * t_b(x) * cos(phi_b(x) + phi_ref)) / 2

The individual optics are not ray traced. Axial scanning within the coherence
length is represented by the global reference phase ``phi_ref``.
"""

from __future__ import annotations

import configparser
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import constants, ndimage, special

from .errors import ManifestError, UndersampledPSFError
from .optics import FWHM_PER_SIGMA, SpdcSetup, fov_fwhm, resolution_fwhm
from .raster import Raster, read_f32, wrap_phase, write_f32
from .sample import ComplexSample

STACK_MAGIC = "QIUPSTACK1"
FRAME_NAME = "frame_{:04d}.f32"


def uniform_phase_steps(n: int) -> tuple[float, ...]:
    """``n`` reference phases evenly spaced over one period, starting at 0."""
    return tuple(2.0 * math.pi * k / n for k in range(n))


@dataclass(frozen=True)
class AcquisitionPlan:
    """How the axial scan is acquired.

    Parameters
    ----------
    phase_steps : tuple of float
        Reference phases (rad), at least three, one per axial position.
    frames_per_step : int
        Frames captured at every phase step.
    exposure : float
        Integration time per frame (s).
    photon_rate_peak : float
        Detected photons per pixel per second at the envelope peak with the
        interference term averaged out.
    system_visibility : float
        Visibility of the empty interferometer, in [0, 1].
    coherence_fwhm_phase : float, optional
        FWHM (rad of reference phase) of a Gaussian visibility envelope over
        the scan, centered on zero reference phase. ``None`` disables it.
    read_noise_rms : float, optional
        Additive Gaussian read noise (electrons rms). Off by default.
    seed : int
        Root seed of the counter-based noise generator.
    double_pass : bool
        The idler traverses the sample twice, squaring the amplitude
        transmission and doubling the phase.
    shot_noise : bool
        Draw Poisson counts; ``False`` returns the expected counts.
    """

    phase_steps: tuple[float, ...] = field(default_factory=lambda: uniform_phase_steps(6))
    frames_per_step: int = 6
    exposure: float = 1.0
    photon_rate_peak: float = 3000.0
    system_visibility: float = 0.8
    coherence_fwhm_phase: float | None = None
    read_noise_rms: float | None = None
    seed: int = 0
    double_pass: bool = True
    shot_noise: bool = True

    def __post_init__(self):
        steps = tuple(float(p) for p in self.phase_steps)
        object.__setattr__(self, "phase_steps", steps)
        if len(steps) < 3:
            raise ValueError(f"at least 3 phase steps are required, got {len(steps)}")
        if not all(math.isfinite(p) for p in steps):
            raise ValueError("phase steps must be finite")
        if self.frames_per_step < 1:
            raise ValueError("frames_per_step must be >= 1")
        if not self.exposure > 0:
            raise ValueError("exposure must be positive")
        if not (self.photon_rate_peak >= 0 and math.isfinite(self.photon_rate_peak)):
            raise ValueError("photon_rate_peak must be non-negative")
        if not 0 <= self.system_visibility <= 1:
            raise ValueError("system_visibility must lie in [0, 1]")
        if self.coherence_fwhm_phase is not None and not self.coherence_fwhm_phase > 0:
            raise ValueError("coherence_fwhm_phase must be positive")
        if self.read_noise_rms is not None and not self.read_noise_rms >= 0:
            raise ValueError("read_noise_rms must be non-negative")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def n_frames(self) -> int:
        return len(self.phase_steps) * self.frames_per_step

    def frame_phases(self) -> np.ndarray:
        return np.repeat(np.asarray(self.phase_steps), self.frames_per_step)

    def replace(self, **changes) -> "AcquisitionPlan":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return AcquisitionPlan(**values)


@dataclass
class FrameStack:
    """Noisy frames of one axial scan; ``frames`` has shape ``(n, height, width)``."""

    frames: np.ndarray
    phase_of_frame: np.ndarray
    plan: AcquisitionPlan
    setup: SpdcSetup
    pixel_pitch: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        self.phase_of_frame = np.asarray(self.phase_of_frame, dtype=float)
        if self.frames.ndim != 3:
            raise ValueError("frames must be a (n, height, width) array")
        if self.frames.shape[0] != self.phase_of_frame.size:
            raise ValueError("one phase per frame is required")

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]


def illumination_envelope(setup: SpdcSetup, width: int, height: int, pixel_pitch: float) -> Raster:
    """Peak-normalized Gaussian birth-zone envelope centered on the grid.

    The FWHM is :func:`qiup.optics.fov_fwhm`; a warning is issued when the
    grid spans less than twice that along either axis.
    """
    fwhm = fov_fwhm(setup)
    if min(width, height) * pixel_pitch < 2 * fwhm:
        warnings.warn(
            f"grid of {width}x{height} px at {pixel_pitch:g} m covers less than twice the FoV FWHM {fwhm:g} m",
            stacklevel=2,
        )
    # offsets from the grid center, (j - (n - 1) / 2) p, exactly antisymmetric
    x = (np.arange(width) - (width - 1) / 2) * pixel_pitch
    y = (np.arange(height) - (height - 1) / 2) * pixel_pitch
    a = 4.0 * math.log(2.0) / fwhm**2
    # separable product keeps the envelope exactly symmetric
    values = np.exp(-a * y**2)[:, None] * np.exp(-a * x**2)[None, :]
    return Raster(values, pixel_pitch)


def gaussian_kernel_1d(fwhm: float, pixel_pitch: float, truncate: float = 6.0) -> np.ndarray:
    """Pixel-integrated, unit-sum Gaussian kernel.

    Each weight is the integral of the continuous Gaussian over one pixel, so a
    step of pixel-wise constant values is blurred into exactly the analytic
    ``erf`` profile when sampled at pixel centers.
    """
    sigma = fwhm / FWHM_PER_SIGMA / pixel_pitch
    half = int(math.ceil(truncate * sigma + 0.5))
    edges = (np.arange(-half, half + 2) - 0.5) / (math.sqrt(2.0) * sigma)
    weights = 0.5 * np.diff(special.erf(edges))
    return weights / weights.sum()


def psf_blur(sample: ComplexSample, setup: SpdcSetup) -> ComplexSample:
    """Blur the complex transmission ``t exp(i phi)`` with the Gaussian PSF."""
    fwhm = resolution_fwhm(setup)
    if fwhm < 2 * sample.pixel_pitch:
        raise UndersampledPSFError(
            f"PSF FWHM {fwhm:g} m is below two pixels of {sample.pixel_pitch:g} m"
        )
    return ComplexSample.from_field(_blur_field(sample.field, fwhm, sample.pixel_pitch), sample.pixel_pitch)


def _blur_field(field: np.ndarray, fwhm: float, pixel_pitch: float) -> np.ndarray:
    kernel = gaussian_kernel_1d(fwhm, pixel_pitch)

    def blur(part):
        part = ndimage.convolve1d(part, kernel, axis=0, mode="nearest")
        return ndimage.convolve1d(part, kernel, axis=1, mode="nearest")

    return blur(field.real) + 1j * blur(field.imag)


def double_pass_sample(sample: ComplexSample) -> ComplexSample:
    return ComplexSample(sample.amplitude**2, wrap_phase(2.0 * sample.phase), sample.pixel_pitch)


def effective_visibility(plan: AcquisitionPlan, phase_ref: float) -> float:
    if plan.coherence_fwhm_phase is None:
        return plan.system_visibility
    return plan.system_visibility * math.exp(-4.0 * math.log(2.0) * phase_ref**2 / plan.coherence_fwhm_phase**2)


@dataclass(frozen=True)
class _ImagedSample:
    """Envelope and blurred field, computed once per stack."""

    envelope: np.ndarray
    field: np.ndarray


def _image_sample(sample: ComplexSample, setup: SpdcSetup, plan: AcquisitionPlan) -> _ImagedSample:
    probed = double_pass_sample(sample) if plan.double_pass else sample
    fwhm = resolution_fwhm(setup)
    if fwhm < 2 * sample.pixel_pitch:
        raise UndersampledPSFError(f"PSF FWHM {fwhm:g} m is below two pixels of {sample.pixel_pitch:g} m")
    field = _blur_field(probed.field, fwhm, sample.pixel_pitch)
    envelope = illumination_envelope(setup, sample.width, sample.height, sample.pixel_pitch).values
    return _ImagedSample(envelope, field)


def _expected(imaged: _ImagedSample, phase_ref: float, plan: AcquisitionPlan) -> np.ndarray:
    v_eff = effective_visibility(plan, phase_ref)
    # Re(t_b exp(i(phi_b + phi_ref))) == t_b cos(phi_b + phi_ref)
    fringe = np.real(imaged.field * np.exp(1j * phase_ref))
    counts = plan.photon_rate_peak * plan.exposure * imaged.envelope * 0.5 * (1.0 + v_eff * fringe)
    return np.maximum(counts, 0.0)


def frame_generator(seed: int, frame_index: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by ``(seed, frame_index)``.

    Draws are consumed in row-major pixel order, so each pixel's noise depends
    only on the key and its index, never on scheduling.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(frame_index),))))


def _noisy(expected: np.ndarray, plan: AcquisitionPlan, frame_index: int) -> np.ndarray:
    if not plan.shot_noise and not plan.read_noise_rms:
        return expected.copy()
    rng = frame_generator(plan.seed, frame_index)
    counts = rng.poisson(expected).astype(float) if plan.shot_noise else expected.copy()
    if plan.read_noise_rms:
        counts += rng.normal(0.0, plan.read_noise_rms, size=counts.shape)
        np.maximum(counts, 0.0, out=counts)
    return counts


def expected_frame(sample: ComplexSample, setup: SpdcSetup, phase_ref: float, plan: AcquisitionPlan) -> Raster:
    """Noise-free expected counts per pixel at reference phase ``phase_ref``."""
    return Raster(_expected(_image_sample(sample, setup, plan), phase_ref, plan), sample.pixel_pitch)


def synthesize_frame(
    sample: ComplexSample,
    setup: SpdcSetup,
    phase_ref: float,
    plan: AcquisitionPlan,
    frame_index: int = 0,
) -> Raster:
    """One camera frame: expected counts with Poisson and optional read noise.

    Read noise is added after the Poisson draw and the result clamped at
    zero, as an offset-subtracted camera would report it.
    """
    expected = _expected(_image_sample(sample, setup, plan), phase_ref, plan)
    return Raster(_noisy(expected, plan, frame_index), sample.pixel_pitch)


def acquire_stack(sample: ComplexSample, setup: SpdcSetup, plan: AcquisitionPlan, threads: int = 1) -> FrameStack:
    """Acquire ``frames_per_step`` frames at every phase step.

    Frame ``k`` (in phase-major order) draws its noise from the stream keyed
    by ``(plan.seed, k)``, so the result is identical for any ``threads``.
    """
    imaged = _image_sample(sample, setup, plan)
    phases = plan.frame_phases()
    expected = {p: _expected(imaged, p, plan) for p in plan.phase_steps}

    def make(k):
        return _noisy(expected[phases[k]], plan, k)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            frames = list(pool.map(make, range(phases.size)))
    else:
        frames = [make(k) for k in range(phases.size)]
    return FrameStack(np.stack(frames), phases, plan, setup, sample.pixel_pitch)


def photon_rate_from_power(power: float, wavelength: float) -> float:
    """Photon flux ``P lambda / (h c)`` in photons per second."""
    if power < 0:
        raise ValueError("power must be non-negative")
    return power * wavelength / (constants.h * constants.c)


def peak_rate_per_pixel(total_rate: float, fov: float, pixel_pitch: float) -> float:
    """Envelope-peak photon rate per pixel for ``total_rate`` spread over the birth zone.

    A peak-normalized Gaussian of FWHM ``fov`` integrates to
    ``pi / (4 ln 2) * fov^2``.
    """
    area = math.pi / (4.0 * math.log(2.0)) * fov**2
    return total_rate * pixel_pitch**2 / area


# --- on-disk stacks ------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def setup_to_section(setup: SpdcSetup) -> dict[str, str]:
    return {k: _fmt(v) for k, v in setup.as_dict().items()}


def setup_from_section(section) -> SpdcSetup:
    values = {}
    for f in fields(SpdcSetup):
        if f.name not in section:
            raise ManifestError(f"manifest setup section lacks {f.name!r}")
        raw = section[f.name]
        values[f.name] = None if raw == "none" else float(raw)
    return SpdcSetup(**values)


def plan_to_section(plan: AcquisitionPlan) -> dict[str, str]:
    return {f.name: _fmt(getattr(plan, f.name)) for f in fields(plan)}


def plan_from_section(section) -> AcquisitionPlan:
    def opt(key):
        return None if section[key] == "none" else float(section[key])

    try:
        return AcquisitionPlan(
            phase_steps=tuple(float(v) for v in section["phase_steps"].split(",")),
            frames_per_step=int(section["frames_per_step"]),
            exposure=float(section["exposure"]),
            photon_rate_peak=float(section["photon_rate_peak"]),
            system_visibility=float(section["system_visibility"]),
            coherence_fwhm_phase=opt("coherence_fwhm_phase"),
            read_noise_rms=opt("read_noise_rms"),
            seed=int(section["seed"]),
            double_pass=section["double_pass"] == "true",
            shot_noise=section.get("shot_noise", "true") == "true",
        )
    except KeyError as exc:
        raise ManifestError(f"manifest plan section lacks {exc.args[0]!r}") from exc


def _write_manifest(path: Path, magic: str, sections: dict[str, dict[str, str]]) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, entries in sections.items():
        parser[name] = entries
    with open(path, "w") as fh:
        fh.write(magic + "\n")
        parser.write(fh)


def read_manifest(path, magic: str) -> configparser.ConfigParser:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}", path=str(path)) from exc
    first, _, rest = text.partition("\n")
    if first.strip() != magic:
        raise ManifestError(f"{path}: bad magic {first.strip()!r}, expected {magic}", path=str(path))
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(rest)
    except configparser.Error as exc:
        raise ManifestError(f"{path}: {exc}", path=str(path)) from exc
    return parser


def save_stack(stack: FrameStack, directory) -> Path:
    """Write ``manifest`` and one ``frame_%04d.f32`` raster per frame."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    height, width = stack.shape
    frames = {FRAME_NAME.format(k): repr(float(p)) for k, p in enumerate(stack.phase_of_frame)}
    _write_manifest(
        directory / "manifest",
        STACK_MAGIC,
        {
            "stack": {"width": str(width), "height": str(height), "pixel_pitch": repr(float(stack.pixel_pitch)),
                      "n_frames": str(len(frames))},
            "setup": setup_to_section(stack.setup),
            "plan": plan_to_section(stack.plan),
            "frames": frames,
        },
    )
    for k, frame in enumerate(stack.frames):
        write_f32(directory / FRAME_NAME.format(k), frame)
    return directory


def load_stack(directory) -> FrameStack:
    directory = Path(directory)
    manifest = read_manifest(directory / "manifest", STACK_MAGIC)
    for name in ("stack", "setup", "plan", "frames"):
        if name not in manifest:
            raise ManifestError(f"{directory}/manifest lacks section [{name}]", path=str(directory))
    info = manifest["stack"]
    width, height = int(info["width"]), int(info["height"])
    pitch = float(info["pixel_pitch"])
    names = list(manifest["frames"].keys())
    if "n_frames" in info and int(info["n_frames"]) != len(names):
        raise ManifestError(f"{directory}: manifest declares {info['n_frames']} frames but lists {len(names)}")
    missing = [n for n in names if not (directory / n).is_file()]
    if missing:
        raise ManifestError(f"{directory}: missing frame files {', '.join(missing)}", path=str(directory))
    frames = np.stack([read_f32(directory / n, (height, width)) for n in names])
    phases = np.array([float(manifest["frames"][n]) for n in names])
    plan = plan_from_section(manifest["plan"])
    if plan.n_frames != len(names):
        raise ManifestError(f"{directory}: plan expects {plan.n_frames} frames, manifest lists {len(names)}")
    return FrameStack(frames, phases, plan, setup_from_section(manifest["setup"]), pitch)


def stack_exists(directory) -> bool:
    return os.path.isfile(os.path.join(directory, "manifest"))
