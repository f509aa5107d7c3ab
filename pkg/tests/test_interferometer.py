import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from qiup.errors import ManifestError, UndersampledPSFError
from qiup.interferometer import (
    FRAME_NAME,
    AcquisitionPlan,
    acquire_stack,
    effective_visibility,
    expected_frame,
    frame_generator,
    gaussian_kernel_1d,
    illumination_envelope,
    load_stack,
    peak_rate_per_pixel,
    photon_rate_from_power,
    psf_blur,
    save_stack,
    synthesize_frame,
    uniform_phase_steps,
)
from qiup.optics import FLAGSHIP, fov_fwhm, resolution_fwhm
from qiup.sample import empty_sample, phantom_knife_edge, phantom_phase_disk, uniform_sample

NOISELESS = AcquisitionPlan(shot_noise=False, double_pass=False, system_visibility=1.0)


@pytest.fixture(autouse=True)
def _quiet_envelope_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        yield


def test_plan_validation():
    assert AcquisitionPlan().n_frames == 36
    for bad in ({"phase_steps": (0.0, 1.0)}, {"frames_per_step": 0}, {"exposure": 0.0}, {"photon_rate_peak": -1.0},
                {"system_visibility": 1.5}, {"seed": -1}, {"coherence_fwhm_phase": 0.0}):
        with pytest.raises(ValueError):
            AcquisitionPlan(**bad)
    np.testing.assert_allclose(uniform_phase_steps(4), [0, math.pi / 2, math.pi, 3 * math.pi / 2])
    np.testing.assert_array_equal(AcquisitionPlan(phase_steps=(0, 1, 2), frames_per_step=2).frame_phases(),
                                  [0, 0, 1, 1, 2, 2])


def test_envelope_fwhm_and_peak():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        env = illumination_envelope(FLAGSHIP, 400, 400, 1e-6)
    assert env.values.max() <= 1.0
    # the grid center lies between pixels 199 and 200: the analytic value there
    a = 4 * math.log(2) / fov_fwhm(FLAGSHIP) ** 2
    assert env.values[200, 200] == pytest.approx(math.exp(-2 * a * (0.5e-6) ** 2), rel=1e-12)
    row = env.values[200] / env.values[200].max()
    above = np.nonzero(row >= 0.5)[0]
    assert (above[-1] - above[0] + 1) * 1e-6 == pytest.approx(fov_fwhm(FLAGSHIP), abs=2e-6)
    np.testing.assert_array_equal(env.values, env.values.T)
    np.testing.assert_array_equal(env.values, env.values[::-1, ::-1])


def test_small_grid_warns():
    with pytest.warns(UserWarning, match="less than twice"):
        illumination_envelope(FLAGSHIP, 64, 64, 1e-6)


@given(st.floats(2.0, 20.0), st.floats(0.2, 2.0))
def test_kernel_unit_sum_and_symmetric(fwhm_px, pitch_um):
    k = gaussian_kernel_1d(fwhm_px * pitch_um * 1e-6, pitch_um * 1e-6)
    assert k.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(k, k[::-1], atol=1e-15)
    assert k.size % 2 == 1


def test_blurred_edge_is_erfc_at_pixel_centers():
    edge = 64e-6
    s = phantom_knife_edge(128, 8, 1e-6, edge)
    blurred = psf_blur(s, FLAGSHIP).amplitude[4]
    sigma = resolution_fwhm(FLAGSHIP) / (2 * math.sqrt(2 * math.log(2)))
    x = (np.arange(128) + 0.5) * 1e-6
    oracle = 0.5 * special.erfc((x - edge) / (math.sqrt(2) * sigma))
    np.testing.assert_allclose(blurred, oracle, atol=1e-10)  # kernel truncated at 6 sigma


def test_undersampled_psf_rejected():
    s = empty_sample(32, 32, 5e-6)
    with pytest.raises(UndersampledPSFError):
        psf_blur(s, FLAGSHIP)
    with pytest.raises(UndersampledPSFError):
        acquire_stack(s, FLAGSHIP, NOISELESS)


def test_expected_counts_forward_model():
    plan = NOISELESS.replace(system_visibility=0.7, photon_rate_peak=2000.0, exposure=0.5)
    s = uniform_sample(200, 200, 1e-6, 0.6, phase=0.4)
    env = illumination_envelope(FLAGSHIP, 200, 200, 1e-6).values
    for phi in (0.0, 1.0, 2.5):
        got = expected_frame(s, FLAGSHIP, phi, plan).values
        oracle = 2000.0 * 0.5 * env * 0.5 * (1 + 0.7 * 0.6 * math.cos(0.4 + phi))
        np.testing.assert_allclose(got, oracle, rtol=1e-12)


def test_double_pass_squares_and_doubles():
    s = uniform_sample(200, 200, 1e-6, 0.6, phase=0.4)
    plan = NOISELESS.replace(double_pass=True)
    env = illumination_envelope(FLAGSHIP, 200, 200, 1e-6).values
    got = expected_frame(s, FLAGSHIP, 0.3, plan).values
    oracle = 3000.0 * env * 0.5 * (1 + 0.36 * math.cos(0.8 + 0.3))
    np.testing.assert_allclose(got, oracle, rtol=1e-12)


def test_coherence_envelope_reduces_visibility():
    plan = AcquisitionPlan(coherence_fwhm_phase=4.0, system_visibility=0.8)
    assert effective_visibility(plan, 0.0) == 0.8
    assert effective_visibility(plan, 2.0) == pytest.approx(0.4)


def test_zero_rate_gives_zero_frames():
    stack = acquire_stack(empty_sample(32, 32, 1e-6), FLAGSHIP, AcquisitionPlan(photon_rate_peak=0.0))
    assert stack.frames.shape == (36, 32, 32)
    assert not stack.frames.any()


def test_phase_disk_frame_is_dark_inside():
    s = phantom_phase_disk(128, 128, 1e-6, 20e-6, math.pi)
    frame = expected_frame(s, FLAGSHIP, 0.0, NOISELESS).values
    assert frame[64, 64] < 0.2 * frame[64, 20]


def test_noise_is_keyed_by_seed_and_frame():
    a = frame_generator(5, 3).poisson(100.0, 10)
    b = frame_generator(5, 3).poisson(100.0, 10)
    c = frame_generator(5, 4).poisson(100.0, 10)
    d = frame_generator(6, 3).poisson(100.0, 10)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


def test_stack_independent_of_threads_and_matches_single_frames():
    s = phantom_knife_edge(48, 40, 1e-6, 24e-6)
    plan = AcquisitionPlan(seed=11, frames_per_step=2)
    one = acquire_stack(s, FLAGSHIP, plan, threads=1)
    four = acquire_stack(s, FLAGSHIP, plan, threads=4)
    np.testing.assert_array_equal(one.frames, four.frames)
    k = 7
    frame = synthesize_frame(s, FLAGSHIP, one.phase_of_frame[k], plan, frame_index=k)
    np.testing.assert_array_equal(frame.values, one.frames[k])


@settings(max_examples=20, deadline=None)
@given(st.floats(50.0, 5000.0))
def test_poisson_mean_and_variance(rate):
    s = empty_sample(64, 64, 1e-6)
    plan = AcquisitionPlan(photon_rate_peak=rate, phase_steps=(0, 2, 4), frames_per_step=30, system_visibility=0.0)
    stack = acquire_stack(s, FLAGSHIP, plan)
    centre = stack.frames[:, 28:36, 28:36]
    expected = expected_frame(s, FLAGSHIP, 0.0, plan).values[28:36, 28:36]
    n = centre.shape[0] * 64
    z_mean = (centre.mean(axis=0) - expected).mean() / math.sqrt(expected.mean() / n)
    assert abs(z_mean) < 5
    assert centre.var(axis=0, ddof=1).mean() / expected.mean() == pytest.approx(1.0, abs=0.1)


def test_read_noise_added_and_clamped():
    s = empty_sample(32, 32, 1e-6)
    plan = AcquisitionPlan(photon_rate_peak=0.0, shot_noise=False, read_noise_rms=3.0)
    frames = acquire_stack(s, FLAGSHIP, plan).frames
    assert frames.min() == 0.0
    assert 0.4 < np.mean(frames > 0) < 0.6


def test_photon_budget():
    assert photon_rate_from_power(15e-12, 3.74e-6) == pytest.approx(2.82413939439e8, rel=1e-9)
    # the whole envelope integrates to the total rate
    fov, p = fov_fwhm(FLAGSHIP), 1e-6
    peak = peak_rate_per_pixel(1e6, fov, p)
    env = illumination_envelope(FLAGSHIP, 600, 600, p).values
    assert (peak * env).sum() == pytest.approx(1e6, rel=1e-6)


# --- stack files ------------------------------------------------------------------


def test_stack_round_trip(tmp_path):
    s = phantom_knife_edge(24, 16, 1e-6, 12e-6)
    plan = AcquisitionPlan(seed=3, frames_per_step=2, coherence_fwhm_phase=9.0)
    stack = acquire_stack(s, FLAGSHIP.replace(na_components=0.2), plan)
    save_stack(stack, tmp_path / "st")
    back = load_stack(tmp_path / "st")
    np.testing.assert_array_equal(back.frames, stack.frames)
    np.testing.assert_array_equal(back.phase_of_frame, stack.phase_of_frame)
    assert back.plan == plan
    assert back.setup == stack.setup
    assert back.pixel_pitch == 1e-6


def test_stack_missing_frame_is_structured_error(tmp_path):
    stack = acquire_stack(empty_sample(8, 8, 1e-6), FLAGSHIP, AcquisitionPlan(frames_per_step=1))
    save_stack(stack, tmp_path)
    (tmp_path / FRAME_NAME.format(3)).unlink()
    with pytest.raises(ManifestError, match=FRAME_NAME.format(3)):
        load_stack(tmp_path)


def test_stack_bad_manifest(tmp_path):
    stack = acquire_stack(empty_sample(8, 8, 1e-6), FLAGSHIP, AcquisitionPlan(frames_per_step=1))
    save_stack(stack, tmp_path)
    manifest = tmp_path / "manifest"
    text = manifest.read_text()
    manifest.write_text(text.replace("n_frames = 6", "n_frames = 7"))
    with pytest.raises(ManifestError):
        load_stack(tmp_path)
    manifest.write_text("NOTASTACK\n" + text.split("\n", 1)[1])
    with pytest.raises(ManifestError):
        load_stack(tmp_path)


def test_stack_files_deterministic(tmp_path):
    s = phantom_knife_edge(16, 16, 1e-6, 8e-6)
    plan = AcquisitionPlan(seed=42, frames_per_step=1)
    for name in ("a", "b"):
        save_stack(acquire_stack(s, FLAGSHIP, plan), tmp_path / name)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
