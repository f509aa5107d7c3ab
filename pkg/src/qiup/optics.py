"""Closed-form imaging metrics of an image-plane nonlinear interferometer.

Sensing happens with the undetected (idler) photon, so the field of view is
set by the pump waist at the crystal and the resolution by the idler emission
cone. Both scale with the magnification between crystal and sample; their
ratio, the number of spatial modes per axis, does not.

All lengths are in meters, angles in radians.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConvergenceError, SetupError

#: FWHM of a Gaussian intensity profile in units of its 1/e^2 radius.
FWHM_PER_WAIST = math.sqrt(2.0 * math.log(2.0))
#: FWHM of a Gaussian in units of its standard deviation.
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

SPDC_RESOLUTION_PREFACTOR = 0.41
COMPONENT_RESOLUTION_PREFACTOR = 0.51
EMISSION_ANGLE_CONSTANT = 2.78

#: Reference length that makes (w_p = 1 mm, L = 1 mm) an aperture of 1 mm^-1/2.
APERTURE_REFERENCE_LENGTH = 1e-3

ENERGY_CONSERVATION_RTOL = 1e-3


def signal_wavelength(lambda_p: float, lambda_i: float) -> float:
    """Signal wavelength from energy conservation, ``1/ls = 1/lp - 1/li``."""
    if not lambda_i > lambda_p > 0:
        raise SetupError(f"idler wavelength {lambda_i!r} must exceed pump wavelength {lambda_p!r}")
    return 1.0 / (1.0 / lambda_p - 1.0 / lambda_i)


@dataclass(frozen=True)
class SpdcSetup:
    """Physical configuration of the interferometer.

    Parameters
    ----------
    lambda_p, lambda_s, lambda_i : float
        Pump, signal and idler vacuum wavelengths (m).
    n_s, n_i : float
        Crystal refractive index at the signal and idler wavelengths.
    crystal_length : float
        Nonlinear crystal length L (m).
    pump_waist : float
        1/e^2 intensity radius of the pump at the crystal (m).
    magnification : float
        Optical magnification M from the crystal to the sample/camera plane.
        Sample-plane sizes are crystal-plane sizes divided by M.
    na_components : float, optional
        Numerical aperture imposed by the optics, in the sample plane.
    """

    lambda_p: float
    lambda_s: float
    lambda_i: float
    n_s: float
    n_i: float
    crystal_length: float
    pump_waist: float
    magnification: float = 1.0
    na_components: float | None = None

    def __post_init__(self):
        for name in ("lambda_p", "lambda_s", "lambda_i", "crystal_length", "pump_waist", "magnification"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise SetupError(f"{name} must be strictly positive and finite, got {value!r}")
        for name in ("n_s", "n_i"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 1.0):
                raise SetupError(f"{name} must be >= 1, got {value!r}")
        if self.na_components is not None and not (0 < self.na_components <= max(self.n_s, self.n_i)):
            raise SetupError(f"na_components must be in (0, n], got {self.na_components!r}")
        if not (self.lambda_s > self.lambda_p and self.lambda_i > self.lambda_p):
            raise SetupError("signal and idler wavelengths must both exceed the pump wavelength")
        mismatch = (1.0 / self.lambda_s + 1.0 / self.lambda_i) * self.lambda_p - 1.0
        if abs(mismatch) > ENERGY_CONSERVATION_RTOL:
            raise SetupError(
                f"energy conservation violated: 1/lp - 1/ls - 1/li is {mismatch:.3e} relative "
                f"(lambda_p={self.lambda_p}, lambda_s={self.lambda_s}, lambda_i={self.lambda_i})"
            )

    @classmethod
    def from_pump(cls, lambda_p: float, lambda_i: float, **kwargs) -> "SpdcSetup":
        """Build a setup, deriving the signal wavelength from energy conservation."""
        return cls(lambda_p=lambda_p, lambda_s=signal_wavelength(lambda_p, lambda_i), lambda_i=lambda_i, **kwargs)

    def replace(self, **changes) -> "SpdcSetup":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return SpdcSetup(**values)

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


#: Setup of the mid-IR microscope: 660 nm pump, 3.74 um idler, 2 mm ppKTP, M = 4.
FLAGSHIP = SpdcSetup.from_pump(
    660e-9,
    3.74e-6,
    n_s=1.84,
    n_i=1.75,
    crystal_length=2e-3,
    pump_waist=431e-6,
    magnification=4.0,
)


@dataclass(frozen=True)
class ImagingMetrics:
    fov_fwhm: float
    resolution_fwhm: float
    modes_per_axis: float
    emission_half_angle: float
    na_limit: float
    limited_by: str = "spdc"


def emission_half_angle_from(lambda_s, lambda_i, n_s, n_i, crystal_length):
    """Half idler emission angle at FWHM, vectorized over numpy inputs.

    ``theta_i = lambda_i * sqrt(2.78 / (pi L) * n_s n_i / (n_s lambda_i + n_i lambda_s))``
    """
    lambda_s = np.asarray(lambda_s, dtype=float)
    lambda_i = np.asarray(lambda_i, dtype=float)
    ratio = n_s * n_i / (n_s * lambda_i + n_i * lambda_s)
    theta = lambda_i * np.sqrt(EMISSION_ANGLE_CONSTANT / (math.pi * crystal_length) * ratio)
    return float(theta) if theta.ndim == 0 else theta


def emission_half_angle(setup: SpdcSetup) -> float:
    return emission_half_angle_from(setup.lambda_s, setup.lambda_i, setup.n_s, setup.n_i, setup.crystal_length)


def fov_fwhm(setup: SpdcSetup) -> float:
    """FWHM of the illumination envelope in the sample plane."""
    return FWHM_PER_WAIST * setup.pump_waist / setup.magnification


def spdc_na(setup: SpdcSetup) -> float:
    """Sample-plane NA of the idler emission cone, ``theta_i * M``."""
    return emission_half_angle(setup) * setup.magnification


def resolution_limit(setup: SpdcSetup) -> str:
    """Which aperture sets the resolution: ``"spdc"`` or ``"components"``."""
    if setup.na_components is not None and setup.na_components < spdc_na(setup):
        return "components"
    return "spdc"


def resolution_fwhm(setup: SpdcSetup) -> float:
    """PSF FWHM in the sample plane.

    The SPDC-limited rule ``0.41 lambda_i / (theta_i M)`` applies unless the
    optics impose a smaller NA, in which case ``0.51 lambda_i / NA`` is used.
    """
    if resolution_limit(setup) == "components":
        return COMPONENT_RESOLUTION_PREFACTOR * setup.lambda_i / setup.na_components
    return SPDC_RESOLUTION_PREFACTOR * setup.lambda_i / spdc_na(setup)


def modes_per_axis(setup: SpdcSetup) -> float:
    """SPDC-limited spatial modes per transverse axis (magnification free)."""
    return (FWHM_PER_WAIST / SPDC_RESOLUTION_PREFACTOR) * setup.pump_waist * emission_half_angle(setup) / setup.lambda_i


def imaging_metrics(setup: SpdcSetup) -> ImagingMetrics:
    """Evaluate FoV, resolution and mode count for ``setup``.

    ``modes_per_axis`` in the result is always the ratio FoV / resolution, so
    it drops below :func:`modes_per_axis` when the optics limit the NA.
    """
    fov = fov_fwhm(setup)
    res = resolution_fwhm(setup)
    limit = resolution_limit(setup)
    na = setup.na_components if limit == "components" else spdc_na(setup)
    return ImagingMetrics(
        fov_fwhm=fov,
        resolution_fwhm=res,
        modes_per_axis=fov / res,
        emission_half_angle=emission_half_angle(setup),
        na_limit=na,
        limited_by=limit,
    )


# --- Schmidt decomposition of the double-Gaussian biphoton --------------------------------


@dataclass(frozen=True)
class DoubleGaussianAmplitude:
    """Joint amplitude ``exp(-(xs+xi)^2/(4 s+^2) - (xs-xi)^2/(4 s-^2))``.

    ``sigma_plus`` is the width along the sum coordinate (set by the pump),
    ``sigma_minus`` the width along the difference coordinate (the position
    correlation). The state is entangled iff the two differ.
    """

    sigma_plus: float
    sigma_minus: float

    def __post_init__(self):
        if not (self.sigma_plus > 0 and self.sigma_minus > 0):
            raise SetupError("double-Gaussian widths must be strictly positive")

    @property
    def entangled(self) -> bool:
        return self.sigma_plus != self.sigma_minus


def double_gaussian_from_setup(setup: SpdcSetup) -> DoubleGaussianAmplitude:
    """Crystal-plane double-Gaussian model of ``setup``.

    Modelling choice: the sum-coordinate width equals the pump waist (pump
    field ``exp(-x^2/w_p^2)`` evaluated at ``(xs+xi)/2``), and the FWHM of
    ``|A|^2`` along the difference coordinate equals the crystal-plane
    SPDC-limited resolution ``0.41 lambda_i / theta_i``.
    """
    res_crystal = SPDC_RESOLUTION_PREFACTOR * setup.lambda_i / emission_half_angle(setup)
    return DoubleGaussianAmplitude(sigma_plus=setup.pump_waist, sigma_minus=res_crystal / FWHM_PER_SIGMA)


def schmidt_number(amp: DoubleGaussianAmplitude, axes: int = 2) -> float:
    """Schmidt number of the double-Gaussian state.

    One transverse axis gives ``K1 = (s+/s- + s-/s+) / 2``. The two transverse
    axes are independent, so their Schmidt coefficients multiply and the full
    transverse state has ``K = K1**2 = (s+/s- + s-/s+)^2 / 4`` (``axes=2``,
    the default).
    """
    if axes not in (1, 2):
        raise SetupError(f"axes must be 1 or 2, got {axes!r}")
    r = amp.sigma_plus / amp.sigma_minus
    return (0.5 * (r + 1.0 / r)) ** axes


def _schmidt_number_svd(amp: DoubleGaussianAmplitude, grid_points: int, grid_extent: float) -> float:
    x = (np.arange(grid_points) - (grid_points - 1) / 2.0) * (grid_extent / grid_points)
    xs, xi = np.meshgrid(x, x, indexing="ij")
    joint = np.exp(
        -((xs + xi) ** 2) / (4.0 * amp.sigma_plus**2) - (xs - xi) ** 2 / (4.0 * amp.sigma_minus**2)
    )
    s = np.linalg.svd(joint, compute_uv=False)
    p = s**2
    return float(p.sum() ** 2 / (p**2).sum())


def schmidt_number_numeric(
    amp: DoubleGaussianAmplitude,
    grid_points: int = 512,
    grid_extent: float | None = None,
    axes: int = 2,
    check_convergence: bool = True,
) -> float:
    """Schmidt number from the singular values of the discretized amplitude.

    The one-axis amplitude ``A(xs, xi)`` is sampled on a square grid and
    ``K1 = (sum s_k^2)^2 / sum s_k^4`` is taken from its singular values;
    ``axes=2`` returns ``K1**2`` for the separable x/y product state.

    Parameters
    ----------
    amp : DoubleGaussianAmplitude
    grid_points : int
        Samples per axis, at least 64.
    grid_extent : float, optional
        Full width of the square grid; defaults to ``6 * max(sigma)``.
    axes : {1, 2}
    check_convergence : bool
        Repeat on a grid with twice the points and raise
        :class:`ConvergenceError` if the result moves by more than 0.5%.
    """
    if axes not in (1, 2):
        raise SetupError(f"axes must be 1 or 2, got {axes!r}")
    widest = max(amp.sigma_plus, amp.sigma_minus)
    if grid_extent is None:
        grid_extent = 6.0 * widest
    if grid_points < 64:
        raise SetupError(f"grid_points must be >= 64, got {grid_points}")
    if grid_extent < 6.0 * widest * (1 - 1e-12):
        raise SetupError(f"grid_extent must be >= 6 * max(sigma) = {6 * widest:g}")
    k = _schmidt_number_svd(amp, grid_points, grid_extent) ** axes
    if check_convergence:
        k_fine = _schmidt_number_svd(amp, 2 * grid_points, grid_extent) ** axes
        if abs(k_fine - k) > 5e-3 * k_fine:
            raise ConvergenceError(
                f"Schmidt number not converged: {k:.6g} at {grid_points} points vs {k_fine:.6g} at {2 * grid_points}"
            )
    return k


# --- Mode-count sweeps over idler wavelength ------------------------------------------------


def effective_aperture(pump_waist: float, crystal_length: float) -> float:
    """Effective crystal aperture ``V = w_p / (l0 sqrt(L))`` in m^-1/2, l0 = 1 mm."""
    return pump_waist / (APERTURE_REFERENCE_LENGTH * math.sqrt(crystal_length))


def crystal_length_for_aperture(aperture: float, pump_waist: float) -> float:
    return (pump_waist / (APERTURE_REFERENCE_LENGTH * aperture)) ** 2


@dataclass(frozen=True)
class ModeCurve:
    """Mode count vs idler wavelength at one effective aperture."""

    aperture: float
    lambda_i: np.ndarray = field(repr=False)
    modes: np.ndarray = field(repr=False)
    paraxial_ok: np.ndarray = field(repr=False)
    emission_half_angle: np.ndarray = field(repr=False)
    squared: bool = False

    @property
    def label(self) -> str:
        return f"V={self.aperture * math.sqrt(APERTURE_REFERENCE_LENGTH):.3g} mm^-1/2"


def mode_sweep(
    lambda_i_range: tuple[float, float],
    samples: int,
    apertures: Sequence[float],
    lambda_p: float,
    n: float | tuple[float, float] = 1.5,
    pump_waist: float = 1e-3,
    paraxial_threshold: float = 0.2,
    squared: bool = False,
    spacing: str = "linear",
) -> list[ModeCurve]:
    """Spatial-mode count vs idler wavelength for a set of effective apertures.

    For each aperture a crystal length is chosen so that ``pump_waist`` and
    ``L`` reproduce it; every sample then builds a full :class:`SpdcSetup`
    with the signal wavelength derived from ``lambda_p``.

    Parameters
    ----------
    lambda_i_range : (float, float)
        Inclusive idler wavelength interval (m), strictly above ``lambda_p``.
    samples : int
    apertures : sequence of float
        Effective apertures in m^-1/2 (1 mm^-1/2 = sqrt(1000) m^-1/2).
    lambda_p : float
    n : float or (float, float)
        Common refractive index, or ``(n_s, n_i)``.
    paraxial_threshold : float
        Samples whose emission half-angle exceeds this (rad) are flagged.
    squared : bool
        Report 2D counts (per-axis count squared).
    spacing : {"linear", "log"}
    """
    lo, hi = lambda_i_range
    if not (lo > lambda_p and hi > lambda_p):
        raise SetupError(f"idler range {lambda_i_range!r} must lie strictly above lambda_p={lambda_p!r}")
    if hi < lo or samples < 1:
        raise SetupError("invalid idler range or sample count")
    n_s, n_i = (n, n) if np.isscalar(n) else n
    if spacing == "log":
        grid = np.geomspace(lo, hi, samples)
    elif spacing == "linear":
        grid = np.linspace(lo, hi, samples)
    else:
        raise SetupError(f"unknown spacing {spacing!r}")

    curves = []
    for aperture in apertures:
        if not aperture > 0:
            raise SetupError(f"effective aperture must be positive, got {aperture!r}")
        length = crystal_length_for_aperture(aperture, pump_waist)
        modes = np.empty(samples)
        theta = np.empty(samples)
        for k, lam_i in enumerate(grid):
            setup = SpdcSetup.from_pump(
                lambda_p, float(lam_i), n_s=n_s, n_i=n_i, crystal_length=length, pump_waist=pump_waist
            )
            theta[k] = emission_half_angle(setup)
            modes[k] = modes_per_axis(setup)
        if squared:
            modes = modes**2
        curves.append(
            ModeCurve(
                aperture=float(aperture),
                lambda_i=grid.copy(),
                modes=modes,
                paraxial_ok=theta <= paraxial_threshold,
                emission_half_angle=theta,
                squared=squared,
            )
        )
    return curves


SWEEP_CSV_HEADER = ("lambda_i_m", "V_per_sqrt_m", "modes", "paraxial_ok")


def write_sweep_csv(curves: Iterable[ModeCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_CSV_HEADER)
        for curve in curves:
            for lam, m, ok in zip(curve.lambda_i, curve.modes, curve.paraxial_ok):
                writer.writerow((repr(float(lam)), repr(curve.aperture), repr(float(m)), "true" if ok else "false"))


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_CSV_HEADER:
            raise SetupError(f"unexpected sweep CSV header {reader.fieldnames!r}")
        return [
            {
                "lambda_i_m": float(r["lambda_i_m"]),
                "V_per_sqrt_m": float(r["V_per_sqrt_m"]),
                "modes": float(r["modes"]),
                "paraxial_ok": r["paraxial_ok"] == "true",
            }
            for r in reader
        ]
