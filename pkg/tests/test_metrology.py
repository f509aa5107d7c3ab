import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, special

from qiup.errors import FitError, SetupError
from qiup.fitting import levenberg_marquardt
from qiup.metrology import (
    QUANTITIES,
    REPORT_CSV_HEADER,
    compare_to_theory,
    extract_profile,
    fit_edge_response,
    fit_gaussian,
    theory_uncertainty,
)
from qiup.optics import FLAGSHIP, imaging_metrics

FWHM_PER_SIGMA = 2 * math.sqrt(2 * math.log(2))


def erf_edge(x, a, b, x0, sigma):
    return a + b * special.erf((x - x0) / (math.sqrt(2) * sigma))


def test_lm_solves_linear_problem_in_one_step_family():
    x = np.linspace(0, 1, 20)
    y = 3 * x - 1
    res = levenberg_marquardt(lambda p: p[0] * x + p[1] - y, lambda p: np.column_stack([x, np.ones_like(x)]), [0, 0])
    np.testing.assert_allclose(res.params, [3, -1], atol=1e-9)
    assert res.converged and res.rmse < 1e-9


def test_lm_raises_when_out_of_iterations():
    x = np.linspace(0, 1, 20)
    y = np.exp(3 * x)
    with pytest.raises(FitError):
        levenberg_marquardt(lambda p: np.exp(p[0] * x) - y, lambda p: (x * np.exp(p[0] * x))[:, None], [0.0],
                            max_iter=1, xtol=1e-300)


def test_edge_fit_noiseless_exact():
    x = np.arange(200) * 0.5e-6
    y = erf_edge(x, 0.4, -0.35, 51.3e-6, 3.3e-6)
    fit = fit_edge_response(x, y)
    assert fit.edge_position == pytest.approx(51.3e-6, rel=1e-9)
    assert fit.sigma == pytest.approx(3.3e-6, rel=1e-9)
    assert fit.psf_fwhm == pytest.approx(3.3e-6 * FWHM_PER_SIGMA, rel=1e-9)
    assert fit.amplitude_scale == pytest.approx(-0.35, rel=1e-9)
    np.testing.assert_allclose(fit.model(x), y, atol=1e-10)


def test_edge_psf_is_derivative_of_model():
    x = np.linspace(0, 100e-6, 400)
    fit = fit_edge_response(x, erf_edge(x, 1.0, 0.5, 40e-6, 4e-6))
    h = 1e-9
    numeric = (fit.model(x + h) - fit.model(x - h)) / (2 * h)
    np.testing.assert_allclose(fit.psf(x), numeric, rtol=1e-5, atol=1e-3 * numeric.max())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(2e-6, 8e-6), st.floats(0.01, 0.05))
def test_edge_fit_agrees_with_curve_fit(seed, sigma, noise):
    rng = np.random.default_rng(seed)
    x = np.arange(160) * 0.5e-6
    y = erf_edge(x, 0.5, 0.5, 40e-6, sigma) + rng.normal(0, noise, x.size)
    ours = fit_edge_response(x, y)
    popt, pcov = optimize.curve_fit(erf_edge, x, y, p0=[0.5, 0.5, 40e-6, sigma])
    assert ours.sigma == pytest.approx(abs(popt[3]), rel=1e-5)
    assert ours.edge_position == pytest.approx(popt[2], rel=1e-6)
    # both quote the same s^2 (J^T J)^-1 covariance
    assert ours.covariance[3, 3] == pytest.approx(pcov[3, 3], rel=1e-3)


def test_edge_fit_recovers_width_with_honest_errors():
    # scatter of fitted widths over seeds matches the reported uncertainty
    x = np.arange(120) * 1e-6
    widths, sigmas = [], []
    for seed in range(60):
        y = erf_edge(x, 0.5, 0.5, 60e-6, 3.3e-6) + np.random.default_rng(seed).normal(0, 0.02, x.size)
        fit = fit_edge_response(x, y)
        widths.append(fit.psf_fwhm)
        sigmas.append(fit.psf_fwhm_sigma)
    assert np.mean(widths) == pytest.approx(3.3e-6 * FWHM_PER_SIGMA, rel=0.01)
    assert np.std(widths) / np.mean(sigmas) == pytest.approx(1.0, abs=0.3)


def test_edge_fit_failures_and_warnings():
    x = np.arange(50) * 1e-6
    with pytest.raises(FitError):
        fit_edge_response(x, np.ones(50))
    with pytest.raises(FitError):
        fit_edge_response(x[:5], x[:5])
    with pytest.raises(FitError):
        fit_edge_response(x, np.where(np.arange(50) == 3, np.nan, 1.0))
    wiggly = erf_edge(x, 0.5, 0.5, 25e-6, 2e-6) + 0.4 * np.sin(x / 2e-6)
    with pytest.warns(UserWarning, match="monotone"):
        try:
            fit_edge_response(x, wiggly)
        except FitError:
            pass


def test_gaussian_fit_noiseless_and_against_curve_fit():
    x = np.arange(300) * 1e-6
    model = lambda x, p, c, w, o: o + p * np.exp(-4 * math.log(2) * (x - c) ** 2 / w**2)  # noqa: E731
    y = model(x, 1500.0, 151e-6, 127e-6, 3.0)
    fit = fit_gaussian(x, y)
    assert fit.fwhm == pytest.approx(127e-6, rel=1e-9)
    assert fit.center == pytest.approx(151e-6, rel=1e-9)
    assert not fit.peak_at_boundary
    noisy = y + np.random.default_rng(1).normal(0, 20, x.size)
    ours = fit_gaussian(x, noisy)
    popt, pcov = optimize.curve_fit(model, x, noisy, p0=[1500, 150e-6, 120e-6, 0])
    assert ours.fwhm == pytest.approx(popt[2], rel=1e-5)
    assert ours.fwhm_sigma == pytest.approx(math.sqrt(pcov[2, 2]), rel=1e-3)


def test_gaussian_peak_on_boundary_warns():
    x = np.arange(100) * 1e-6
    y = np.exp(-4 * math.log(2) * x**2 / (40e-6) ** 2)
    with pytest.warns(UserWarning, match="boundary"):
        fit = fit_gaussian(x, y)
    assert fit.peak_at_boundary


def test_extract_profile_band_and_mask():
    img = np.tile(np.arange(6, dtype=float), (10, 1)) + np.arange(10)[:, None] * 100
    x, y = extract_profile(img, 2e-6, axis="x", band=2)
    np.testing.assert_allclose(x, (np.arange(6) + 0.5) * 2e-6)
    np.testing.assert_allclose(y, np.arange(6) + 450)
    x, y = extract_profile(img, 1e-6, axis="y", band=1, center=2)
    np.testing.assert_allclose(y, np.arange(10) * 100 + 2)
    mask = np.ones_like(img, dtype=bool)
    mask[:, 1] = False
    mask[4, 3] = False
    x, y = extract_profile(img, 1e-6, band=2, mask=mask)
    assert x.size == 5
    assert y[2] == 503


# --- comparison with theory -----------------------------------------------------


LAB_MEASURED = {"fov_fwhm": (161e-6, 1e-6), "resolution_fwhm": (9e-6, 1e-6), "modes_per_axis": (18.0, 2.0)}
THEORY_VALUES = {"fov_fwhm": 127e-6, "resolution_fwhm": 7.9e-6, "modes_per_axis": 16.1}
THEORY_SIGMA = {"fov_fwhm": 2e-6, "resolution_fwhm": 0.1e-6, "modes_per_axis": 0.3}


def test_table_comparison_ratios_and_z():
    report = compare_to_theory(FLAGSHIP, LAB_MEASURED, theory_sigma=THEORY_SIGMA, theory_values=THEORY_VALUES)
    fov = report.row("fov_fwhm")
    assert fov.ratio == pytest.approx(161 / 127, rel=1e-12)
    assert fov.z == pytest.approx(34 / math.sqrt(5), rel=1e-9)
    assert report.row("resolution_fwhm").z == pytest.approx(1.1 / math.hypot(1, 0.1), rel=1e-9)
    assert report.row("modes_per_axis").ratio == pytest.approx(18 / 16.1, rel=1e-12)
    lines = report.to_csv().splitlines()
    assert lines[0] == ",".join(REPORT_CSV_HEADER)
    assert len(lines) == 4
    assert "fov_fwhm" in report.to_text()


def test_comparison_uses_computed_theory_by_default():
    report = compare_to_theory(FLAGSHIP, LAB_MEASURED, theory_sigma=THEORY_SIGMA)
    m = imaging_metrics(FLAGSHIP)
    for q in QUANTITIES:
        assert report.row(q).theory == getattr(m, q)


def test_comparison_subset_and_errors():
    report = compare_to_theory(FLAGSHIP, {"fov_fwhm": (127e-6, 1e-6)})
    assert [r.quantity for r in report.rows] == ["fov_fwhm"]
    with pytest.raises(SetupError):
        compare_to_theory(FLAGSHIP, {"fov_fwhm": (127e-6, 0.0)})
    with pytest.raises(SetupError):
        compare_to_theory(FLAGSHIP, {})
    with pytest.raises(SetupError):
        compare_to_theory(FLAGSHIP, {"brightness": (1.0, 1.0)})


def test_theory_uncertainty_propagation():
    # FoV is linear in the pump waist and inverse in M: relative errors add in quadrature
    sig = theory_uncertainty(FLAGSHIP, {"pump_waist": 4.31e-6, "magnification": 0.04})
    m = imaging_metrics(FLAGSHIP)
    assert sig["fov_fwhm"] / m.fov_fwhm == pytest.approx(math.hypot(0.01, 0.01), rel=1e-5)
    # modes do not depend on M
    only_m = theory_uncertainty(FLAGSHIP, {"magnification": 0.04})
    assert only_m["modes_per_axis"] == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(SetupError):
        theory_uncertainty(FLAGSHIP, {"lambda_s": 1e-9})


def test_theory_uncertainty_idler_rederives_signal():
    sig = theory_uncertainty(FLAGSHIP, {"lambda_i": 10e-9})
    assert sig["resolution_fwhm"] > 0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        compare_to_theory(FLAGSHIP, LAB_MEASURED, setup_sigma={"lambda_i": 10e-9})
