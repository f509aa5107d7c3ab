import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qiup.errors import ConvergenceError, SetupError
from qiup.optics import (
    FLAGSHIP,
    SWEEP_CSV_HEADER,
    DoubleGaussianAmplitude,
    SpdcSetup,
    crystal_length_for_aperture,
    double_gaussian_from_setup,
    effective_aperture,
    emission_half_angle,
    emission_half_angle_from,
    fov_fwhm,
    imaging_metrics,
    mode_sweep,
    modes_per_axis,
    read_sweep_csv,
    resolution_fwhm,
    resolution_limit,
    schmidt_number,
    schmidt_number_numeric,
    signal_wavelength,
    write_sweep_csv,
)

# Oracles evaluated independently at 30 digits (mpmath, not this package).
LAMBDA_S = 8.01428571428571428e-07
THETA = 0.0490466484234921076
FOV = 1.26865929926042398e-04
RES = 7.81602846110856819e-06
MODES = 16.2315081831276577


def test_signal_wavelength_energy_conservation():
    assert signal_wavelength(660e-9, 3.74e-6) == pytest.approx(LAMBDA_S, rel=1e-14)
    # degenerate pairs share the wavelength
    assert signal_wavelength(660e-9, 1320e-9) == pytest.approx(1320e-9, rel=1e-14)
    with pytest.raises(SetupError):
        signal_wavelength(660e-9, 600e-9)


def test_flagship_metrics_against_oracle():
    m = imaging_metrics(FLAGSHIP)
    assert FLAGSHIP.lambda_s == pytest.approx(LAMBDA_S, rel=1e-14)
    assert m.emission_half_angle == pytest.approx(THETA, rel=1e-13)
    assert m.fov_fwhm == pytest.approx(FOV, rel=1e-13)
    assert m.resolution_fwhm == pytest.approx(RES, rel=1e-13)
    assert m.modes_per_axis == pytest.approx(MODES, rel=1e-13)
    assert m.limited_by == "spdc"


def test_magnification_two_scales_lengths_not_modes():
    m = imaging_metrics(FLAGSHIP.replace(magnification=2.0))
    assert m.fov_fwhm == pytest.approx(2.53731859852084796e-04, rel=1e-13)
    assert m.resolution_fwhm == pytest.approx(1.56320569222171364e-05, rel=1e-13)
    assert m.modes_per_axis == pytest.approx(MODES, rel=1e-13)


def test_component_na_limit_switches_rule():
    setup = FLAGSHIP.replace(na_components=0.1)
    assert resolution_limit(setup) == "components"
    m = imaging_metrics(setup)
    assert m.limited_by == "components"
    assert m.resolution_fwhm == pytest.approx(1.9074e-05, rel=1e-13)
    assert m.modes_per_axis == pytest.approx(6.65124934078024525, rel=1e-12)
    # wider optics than the emission cone leave the SPDC rule in charge
    assert resolution_limit(FLAGSHIP.replace(na_components=0.5)) == "spdc"
    assert resolution_fwhm(FLAGSHIP.replace(na_components=0.5)) == pytest.approx(RES)


@pytest.mark.parametrize(
    "changes",
    [
        {"pump_waist": 0.0},
        {"crystal_length": -1e-3},
        {"magnification": float("nan")},
        {"n_s": 0.9},
        {"lambda_s": 700e-9},  # breaks energy conservation
        {"na_components": 3.0},
    ],
)
def test_invalid_setups_rejected(changes):
    with pytest.raises(SetupError):
        FLAGSHIP.replace(**changes)


def test_emission_half_angle_vectorized_matches_scalar():
    lam_i = np.array([2e-6, 3.74e-6, 5e-6])
    lam_s = 1 / (1 / 660e-9 - 1 / lam_i)
    theta = emission_half_angle_from(lam_s, lam_i, 1.84, 1.75, 2e-3)
    for k in range(3):
        setup = SpdcSetup.from_pump(660e-9, lam_i[k], n_s=1.84, n_i=1.75, crystal_length=2e-3, pump_waist=431e-6)
        assert theta[k] == pytest.approx(emission_half_angle(setup), rel=1e-14)


setups = st.builds(
    lambda li, L, wp, m: SpdcSetup.from_pump(660e-9, li, n_s=1.84, n_i=1.75, crystal_length=L, pump_waist=wp,
                                             magnification=m),
    st.floats(1.0e-6, 8e-6),
    st.floats(0.2e-3, 20e-3),
    st.floats(20e-6, 2e-3),
    st.floats(0.5, 20.0),
)


@given(setups)
def test_modes_equal_fov_over_resolution(setup):
    assert modes_per_axis(setup) == pytest.approx(fov_fwhm(setup) / resolution_fwhm(setup), rel=1e-12)
    assert imaging_metrics(setup).modes_per_axis == pytest.approx(modes_per_axis(setup), rel=1e-12)


@given(setups, st.floats(1.1, 4.0))
def test_longer_crystal_narrows_emission(setup, factor):
    longer = setup.replace(crystal_length=setup.crystal_length * factor)
    assert emission_half_angle(longer) < emission_half_angle(setup)
    assert resolution_fwhm(longer) > resolution_fwhm(setup)
    assert fov_fwhm(longer) == fov_fwhm(setup)


@given(setups, st.floats(1.1, 4.0))
def test_magnification_invariance_of_modes(setup, factor):
    scaled = setup.replace(magnification=setup.magnification * factor)
    assert modes_per_axis(scaled) == pytest.approx(modes_per_axis(setup), rel=1e-12)
    assert fov_fwhm(scaled) == pytest.approx(fov_fwhm(setup) / factor, rel=1e-12)


# --- Schmidt number ----------------------------------------------------------


@pytest.mark.parametrize(
    "ratio, per_axis",
    [(1, 1.0), (2, 1.25), (5, 2.6), (10, 5.05), (20, 10.025)],
)
def test_schmidt_closed_form_oracle(ratio, per_axis):
    amp = DoubleGaussianAmplitude(sigma_plus=ratio * 1e-6, sigma_minus=1e-6)
    assert schmidt_number(amp, axes=1) == pytest.approx(per_axis, rel=1e-14)
    assert schmidt_number(amp) == pytest.approx(per_axis**2, rel=1e-14)
    # only the ratio of the widths matters, and either can be the larger
    swapped = DoubleGaussianAmplitude(sigma_plus=1e-6, sigma_minus=ratio * 1e-6)
    assert schmidt_number(swapped) == pytest.approx(schmidt_number(amp), rel=1e-14)


def test_separable_state_has_unit_schmidt_number():
    amp = DoubleGaussianAmplitude(3e-6, 3e-6)
    assert not amp.entangled
    assert schmidt_number_numeric(amp, grid_points=128) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("ratio", [2, 5, 10])
def test_schmidt_numeric_matches_closed_form(ratio):
    amp = DoubleGaussianAmplitude(ratio * 1e-6, 1e-6)
    assert schmidt_number_numeric(amp, grid_points=256, axes=1) == pytest.approx(schmidt_number(amp, axes=1), rel=5e-3)


def test_schmidt_product_rule_in_two_dimensions():
    # explicit 4D amplitude (x1, y1, x2, y2) reshaped to a (x1 y1) x (x2 y2) matrix
    amp = DoubleGaussianAmplitude(3e-6, 1e-6)
    n, extent = 24, 6 * 3e-6
    x = (np.arange(n) - (n - 1) / 2) * extent / n
    x1, x2 = np.meshgrid(x, x, indexing="ij")
    one_d = np.exp(-((x1 + x2) ** 2) / (4 * amp.sigma_plus**2) - ((x1 - x2) ** 2) / (4 * amp.sigma_minus**2))
    four_d = np.einsum("ac,bd->abcd", one_d, one_d).reshape(n * n, n * n)
    s4 = np.linalg.svd(four_d, compute_uv=False)
    p4 = s4**2 / np.sum(s4**2)
    s1 = np.linalg.svd(one_d, compute_uv=False)
    p1 = s1**2 / np.sum(s1**2)
    k4, k1 = 1 / np.sum(p4**2), 1 / np.sum(p1**2)
    assert k4 == pytest.approx(k1**2, rel=1e-9)


def test_schmidt_numeric_rejects_coarse_grid():
    amp = DoubleGaussianAmplitude(20e-6, 1e-6)
    with pytest.raises(ConvergenceError):
        schmidt_number_numeric(amp, grid_points=64)


def test_double_gaussian_from_flagship_is_entangled():
    amp = double_gaussian_from_setup(FLAGSHIP)
    assert amp.sigma_plus == FLAGSHIP.pump_waist
    assert amp.entangled
    assert schmidt_number(amp, axes=1) > 1


# --- effective aperture and mode sweeps ---------------------------------------


def test_aperture_round_trip_and_units():
    v = effective_aperture(431e-6, 2e-3)
    assert v == pytest.approx(9.63745298302409359, rel=1e-14)  # m^-1/2
    assert crystal_length_for_aperture(v, 431e-6) == pytest.approx(2e-3, rel=1e-14)


APERTURES = [a * math.sqrt(1e3) for a in (1.0, 0.71, 0.45, 0.3)]


def test_sweep_monotone_beyond_degeneracy_and_ordered():
    curves = mode_sweep((1.33e-6, 5e-6), 150, APERTURES, 660e-9)
    for c in curves:
        assert np.all(np.diff(c.modes) < 0)
    for big, small in zip(curves, curves[1:]):
        assert np.all(big.modes > small.modes)


def test_sweep_peaks_at_degeneracy():
    (curve,) = mode_sweep((0.9e-6, 3e-6), 2101, [APERTURES[0]], 660e-9)
    peak = curve.lambda_i[np.argmax(curve.modes)]
    assert peak == pytest.approx(1.32e-6, abs=2e-9)


def test_flagship_point_on_its_curve():
    (curve,) = mode_sweep((3.74e-6, 3.74e-6), 1, [effective_aperture(431e-6, 2e-3)], 660e-9, n=(1.84, 1.75),
                          pump_waist=2e-3)
    assert curve.modes[0] == pytest.approx(MODES, rel=1e-12)


def test_sweep_squared_and_log_spacing():
    (lin,) = mode_sweep((2e-6, 4e-6), 5, [APERTURES[1]], 660e-9)
    (sq,) = mode_sweep((2e-6, 4e-6), 5, [APERTURES[1]], 660e-9, squared=True)
    np.testing.assert_allclose(sq.modes, lin.modes**2, rtol=1e-14)
    (lg,) = mode_sweep((2e-6, 4e-6), 3, [APERTURES[1]], 660e-9, spacing="log")
    assert lg.lambda_i[1] == pytest.approx(math.sqrt(8e-12), rel=1e-12)


def test_sweep_flags_wide_angles():
    (curve,) = mode_sweep((1e-6, 8e-6), 50, [20 * math.sqrt(1e3)], 660e-9, paraxial_threshold=0.2)
    assert not curve.paraxial_ok.all()
    np.testing.assert_array_equal(curve.paraxial_ok, curve.emission_half_angle <= 0.2)


def test_sweep_rejects_idler_below_pump():
    with pytest.raises(SetupError):
        mode_sweep((500e-9, 2e-6), 10, APERTURES, 660e-9)


def test_sweep_csv_round_trip(tmp_path):
    curves = mode_sweep((2e-6, 3e-6), 4, APERTURES[:2], 660e-9)
    path = tmp_path / "modes.csv"
    write_sweep_csv(curves, path)
    assert path.read_text().splitlines()[0] == ",".join(SWEEP_CSV_HEADER)
    rows = read_sweep_csv(path)
    assert len(rows) == 8
    assert rows[5]["modes"] == curves[1].modes[1]
    assert rows[0]["V_per_sqrt_m"] == APERTURES[0]


@settings(max_examples=30)
@given(st.floats(0.1, 2.0), st.floats(1.0, 3.0))
def test_sweep_independent_of_pump_waist_at_fixed_aperture(v_mm, scale):
    v = v_mm * math.sqrt(1e3)
    (a,) = mode_sweep((2e-6, 2e-6), 1, [v], 660e-9, pump_waist=1e-3)
    (b,) = mode_sweep((2e-6, 2e-6), 1, [v], 660e-9, pump_waist=scale * 1e-3)
    assert b.modes[0] == pytest.approx(a.modes[0], rel=1e-10)
