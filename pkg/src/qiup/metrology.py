"""Characterization fits: knife-edge PSF width, Gaussian field of view, theory comparison.

Positions are in meters, values in counts (or any linear intensity unit).
Both fitters work on internally standardized coordinates, which keeps the
damped Gauss-Newton iteration well scaled when positions are ~1e-4 m and
values ~1e4 counts.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import FitError, SetupError
from .fitting import levenberg_marquardt
from .optics import FWHM_PER_SIGMA, SpdcSetup, imaging_metrics, signal_wavelength

# erf argument spanning the 25% to 75% points of a step, in units of sigma
_QUARTILE_WIDTH = 2.0 * math.sqrt(2.0) * special.erfinv(0.5)


@dataclass(frozen=True)
class EdgeFit:
    amplitude_offset: float
    amplitude_scale: float
    edge_position: float
    sigma: float
    fit_rmse: float
    covariance: np.ndarray
    iterations: int = 0

    @property
    def psf_fwhm(self) -> float:
        return FWHM_PER_SIGMA * self.sigma

    @property
    def psf_fwhm_sigma(self) -> float:
        return FWHM_PER_SIGMA * math.sqrt(max(self.covariance[3, 3], 0.0))

    def model(self, x):
        z = (np.asarray(x, dtype=float) - self.edge_position) / (math.sqrt(2.0) * self.sigma)
        return self.amplitude_offset + self.amplitude_scale * special.erf(z)

    def psf(self, x):
        """Analytic derivative of :meth:`model`, a Gaussian of std ``sigma``."""
        u = np.asarray(x, dtype=float) - self.edge_position
        return self.amplitude_scale * math.sqrt(2.0 / math.pi) / self.sigma * np.exp(-(u**2) / (2.0 * self.sigma**2))


@dataclass(frozen=True)
class GaussianFit:
    peak: float
    center: float
    fwhm: float
    offset: float
    fit_rmse: float
    covariance: np.ndarray
    peak_at_boundary: bool = False
    iterations: int = 0

    @property
    def fwhm_sigma(self) -> float:
        return math.sqrt(max(self.covariance[2, 2], 0.0))

    def model(self, x):
        u = np.asarray(x, dtype=float) - self.center
        return self.offset + self.peak * np.exp(-4.0 * math.log(2.0) * u**2 / self.fwhm**2)


def _prepare(positions, values):
    x = np.asarray(positions, dtype=float).ravel()
    y = np.asarray(values, dtype=float).ravel()
    if x.size != y.size:
        raise FitError("positions and values differ in length")
    if x.size < 8:
        raise FitError(f"at least 8 samples are required, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise FitError("profile contains non-finite samples")
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    x_center = 0.5 * (x[0] + x[-1])
    x_scale = 0.5 * (x[-1] - x[0])
    if not x_scale > 0:
        raise FitError("profile positions do not span a range")
    y_scale = float(np.max(np.abs(y))) or 1.0
    return x, y, x_center, x_scale, y_scale


def _crossing(x, f, level):
    """First ``x`` at which ``f`` rises through ``level``, linearly interpolated."""
    above = np.nonzero(f >= level)[0]
    if above.size == 0:
        return float(x[-1])
    i = above[0]
    if i == 0:
        return float(x[0])
    return float(x[i - 1] + (level - f[i - 1]) * (x[i] - x[i - 1]) / (f[i] - f[i - 1]))


def fit_edge_response(positions, values, xtol: float = 1e-10, max_iter: int = 200) -> EdgeFit:
    """Fit ``a + b erf((x - x0) / (sqrt(2) sigma))`` to a knife-edge profile.

    Initialization takes the plateau levels from the medians of the outer 15%
    of samples on each side, ``x0`` from the 50% crossing and ``sigma`` from
    the 25-75% crossing distance. A warning is issued when the profile is far
    from monotone.
    """
    x, y, xc, xs, ys = _prepare(positions, values)
    u, v = (x - xc) / xs, y / ys
    n_edge = max(2, int(round(0.15 * x.size)))
    left, right = float(np.median(v[:n_edge])), float(np.median(v[-n_edge:]))
    if math.isclose(left, right, rel_tol=0, abs_tol=1e-12):
        raise FitError("profile has no step between its plateaus")
    f = (v - left) / (right - left)
    _warn_if_not_monotone(f)
    u25, u50, u75 = (_crossing(u, f, q) for q in (0.25, 0.5, 0.75))
    sigma0 = max(abs(u75 - u25) / _QUARTILE_WIDTH, 2.0 * float(np.min(np.diff(u))) or 1e-3)
    p0 = [0.5 * (left + right), 0.5 * (right - left), u50, sigma0]
    root2 = math.sqrt(2.0)

    def residual(p):
        return p[0] + p[1] * special.erf((u - p[2]) / (root2 * p[3])) - v

    def jacobian(p):
        z = (u - p[2]) / (root2 * p[3])
        g = p[1] * (2.0 / math.sqrt(math.pi)) * np.exp(-(z**2))
        return np.column_stack([np.ones_like(u), special.erf(z), -g / (root2 * p[3]), -g * z / p[3]])

    res = levenberg_marquardt(residual, jacobian, p0, xtol=xtol, max_iter=max_iter)
    a, b, x0, sigma = res.params
    if sigma < 0:
        b, sigma = -b, -sigma
    scale = np.array([ys, ys, xs, xs])
    cov = res.covariance * np.outer(scale, scale)
    return EdgeFit(
        amplitude_offset=a * ys,
        amplitude_scale=b * ys,
        edge_position=xc + x0 * xs,
        sigma=sigma * xs,
        fit_rmse=res.rmse * ys,
        covariance=cov,
        iterations=res.iterations,
    )


def _warn_if_not_monotone(f: np.ndarray) -> None:
    # f rises from ~0 to ~1; after smoothing over a tenth of the profile,
    # the largest fall below the running maximum measures real reversals
    k = max(3, f.size // 10)
    smooth = np.convolve(f, np.ones(k) / k, mode="valid")
    drawdown = float(np.max(np.maximum.accumulate(smooth) - smooth))
    if drawdown > 0.2:
        warnings.warn(f"edge profile is not approximately monotone (falls back by {drawdown:.0%} of the step)",
                      stacklevel=3)


def fit_gaussian(positions, values, xtol: float = 1e-10, max_iter: int = 200) -> GaussianFit:
    """Fit ``offset + peak exp(-4 ln2 (x - c)^2 / fwhm^2)``.

    When the maximum sample sits on the first or last position the result
    has ``peak_at_boundary`` set and a warning is issued.
    """
    x, y, xc, xs, ys = _prepare(positions, values)
    u, v = (x - xc) / xs, y / ys
    imax = int(np.argmax(v))
    at_boundary = imax in (0, v.size - 1)
    if at_boundary:
        warnings.warn("profile maximum lies on the domain boundary", stacklevel=2)
    offset0 = float(np.min(v))
    peak0 = float(v[imax] - offset0)
    if not peak0 > 0:
        raise FitError("profile is flat")
    f = (v - offset0) / peak0
    lo = _crossing(u[: imax + 1], f[: imax + 1], 0.5)
    hi = _crossing(u[imax:][::-1], f[imax:][::-1], 0.5)
    fwhm0 = max(hi - lo, 4.0 * float(np.min(np.diff(u))) or 1e-3)
    p0 = [peak0, float(u[imax]), fwhm0, offset0]
    c4 = 4.0 * math.log(2.0)

    def residual(p):
        return p[3] + p[0] * np.exp(-c4 * (u - p[1]) ** 2 / p[2] ** 2) - v

    def jacobian(p):
        d = u - p[1]
        e = np.exp(-c4 * d**2 / p[2] ** 2)
        return np.column_stack([e, p[0] * e * 2 * c4 * d / p[2] ** 2, p[0] * e * 2 * c4 * d**2 / p[2] ** 3,
                                np.ones_like(u)])

    res = levenberg_marquardt(residual, jacobian, p0, xtol=xtol, max_iter=max_iter)
    peak, center, fwhm, offset = res.params
    scale = np.array([ys, xs, xs, ys])
    return GaussianFit(
        peak=peak * ys,
        center=xc + center * xs,
        fwhm=abs(fwhm) * xs,
        offset=offset * ys,
        fit_rmse=res.rmse * ys,
        covariance=res.covariance * np.outer(scale, scale),
        peak_at_boundary=at_boundary,
        iterations=res.iterations,
    )


def extract_profile(image, pixel_pitch: float, axis: str = "x", band: int = 10, center: int | None = None, mask=None):
    """Average a ``band``-pixel strip through ``center`` into a 1D profile.

    ``axis`` is the direction the profile runs along. With ``mask`` given,
    only ``True`` pixels are averaged and positions without any are dropped.

    Returns
    -------
    positions, values : ndarray
    """
    img = np.asarray(image, dtype=float)
    if axis == "y":
        img = img.T
        mask = None if mask is None else np.asarray(mask).T
    elif axis != "x":
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    rows = img.shape[0]
    center = rows // 2 if center is None else center
    lo = max(0, center - band // 2)
    hi = min(rows, lo + max(band, 1))
    strip = img[lo:hi]
    positions = (np.arange(img.shape[1]) + 0.5) * pixel_pitch
    if mask is None:
        return positions, strip.mean(axis=0)
    m = np.asarray(mask[lo:hi], dtype=bool)
    count = m.sum(axis=0)
    keep = count > 0
    values = np.where(m, strip, 0.0).sum(axis=0)[keep] / count[keep]
    return positions[keep], values


# --- comparison with theory ------------------------------------------------------------

QUANTITIES = ("fov_fwhm", "resolution_fwhm", "modes_per_axis")
REPORT_CSV_HEADER = ("quantity", "measured", "sigma_meas", "theory", "sigma_theory", "ratio", "z")


@dataclass(frozen=True)
class ComparisonRow:
    quantity: str
    measured: float
    sigma_meas: float
    theory: float
    sigma_theory: float

    @property
    def ratio(self) -> float:
        return self.measured / self.theory

    @property
    def z(self) -> float:
        return (self.measured - self.theory) / math.hypot(self.sigma_meas, self.sigma_theory)


@dataclass(frozen=True)
class ComparisonReport:
    theory: object
    rows: tuple[ComparisonRow, ...]

    def row(self, quantity: str) -> ComparisonRow:
        for r in self.rows:
            if r.quantity == quantity:
                return r
        raise KeyError(quantity)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_CSV_HEADER)
        for r in self.rows:
            writer.writerow((r.quantity, *(repr(float(v)) for v in (r.measured, r.sigma_meas, r.theory, r.sigma_theory, r.ratio, r.z))))
        return buf.getvalue()

    def to_text(self) -> str:
        units = {"fov_fwhm": ("um", 1e6), "resolution_fwhm": ("um", 1e6), "modes_per_axis": ("", 1.0)}
        lines = [f"{'quantity':<18}{'measured':>20}{'theory':>20}{'ratio':>9}{'z':>8}"]
        for r in self.rows:
            unit, k = units.get(r.quantity, ("", 1.0))
            meas = f"{r.measured * k:.3g} +- {r.sigma_meas * k:.2g} {unit}".strip()
            theo = f"{r.theory * k:.3g} +- {r.sigma_theory * k:.2g} {unit}".strip()
            lines.append(f"{r.quantity:<18}{meas:>20}{theo:>20}{r.ratio:>9.3f}{r.z:>8.2f}")
        return "\n".join(lines) + "\n"


def _perturbed(setup: SpdcSetup, name: str, value: float) -> SpdcSetup:
    if name == "lambda_i":
        return setup.replace(lambda_i=value, lambda_s=signal_wavelength(setup.lambda_p, value))
    if name == "lambda_p":
        return setup.replace(lambda_p=value, lambda_s=signal_wavelength(value, setup.lambda_i))
    return setup.replace(**{name: value})


def theory_uncertainty(setup: SpdcSetup, setup_sigma: dict[str, float]) -> dict[str, float]:
    """First-order propagation of independent setup-parameter uncertainties.

    Changing a wavelength re-derives the signal wavelength so energy stays
    conserved.
    """
    variance = dict.fromkeys(QUANTITIES, 0.0)
    for name, sigma in setup_sigma.items():
        if name not in setup.as_dict() or name in ("lambda_s", "na_components"):
            raise SetupError(f"cannot propagate uncertainty of {name!r}")
        base = getattr(setup, name)
        h = 1e-6 * abs(base)
        up = imaging_metrics(_perturbed(setup, name, base + h))
        down = imaging_metrics(_perturbed(setup, name, base - h))
        for q in QUANTITIES:
            deriv = (getattr(up, q) - getattr(down, q)) / (2 * h)
            variance[q] += (deriv * sigma) ** 2
    return {q: math.sqrt(v) for q, v in variance.items()}


def compare_to_theory(
    setup: SpdcSetup,
    measured: dict[str, tuple[float, float]],
    theory_sigma: dict[str, float] | None = None,
    setup_sigma: dict[str, float] | None = None,
    theory_values: dict[str, float] | None = None,
) -> ComparisonReport:
    """Ratios and z-scores of measured FoV, resolution and mode count against theory.

    Parameters
    ----------
    setup : SpdcSetup
    measured : dict
        ``quantity -> (value, sigma)`` for any of the keys in
        :data:`QUANTITIES`; rows appear in that canonical order.
    theory_sigma : dict, optional
        Explicit theory uncertainties per quantity.
    setup_sigma : dict, optional
        Setup-parameter uncertainties to propagate when ``theory_sigma`` is
        not given. Without either, theory values are treated as exact.
    theory_values : dict, optional
        Quoted theory values that replace the computed ones, e.g. to compare
        against rounded published numbers.
    """
    theory = imaging_metrics(setup)
    if theory_sigma is None:
        theory_sigma = theory_uncertainty(setup, setup_sigma) if setup_sigma else dict.fromkeys(QUANTITIES, 0.0)
    unknown = set(measured) - set(QUANTITIES)
    if unknown:
        raise SetupError(f"cannot compare {', '.join(sorted(unknown))}; known quantities are {', '.join(QUANTITIES)}")
    if not measured:
        raise SetupError("no measured values to compare")
    rows = []
    for q in (q for q in QUANTITIES if q in measured):
        value, sigma = measured[q]
        if not sigma > 0:
            raise SetupError(f"measured uncertainty for {q!r} must be positive")
        reference = (theory_values or {}).get(q, getattr(theory, q))
        rows.append(ComparisonRow(q, float(value), float(sigma), float(reference), float(theory_sigma.get(q, 0.0))))
    return ComparisonReport(theory, tuple(rows))
