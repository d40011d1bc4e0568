import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformatomo.geometry import DeformationParams, sample_deformations
from deformatomo.metrics import FscCurve, deformation_error, fsc, fsc_resolution, snr_db


def test_snr_equal_variances_is_zero_db():
    rng = np.random.default_rng(0)
    s = rng.standard_normal(1000)
    assert snr_db(s, s[::-1].copy()) == pytest.approx(0.0, abs=1e-12)


def test_snr_scaled_noise_is_ten_db():
    rng = np.random.default_rng(1)
    s = rng.standard_normal((4, 8, 8))
    assert snr_db(s, s / math.sqrt(10)) == pytest.approx(10.0, abs=1e-12)


def test_snr_rejects_silent_noise():
    with pytest.raises(ValueError):
        snr_db(np.ones(4), np.zeros(4))


def test_fsc_self_is_one():
    v = np.random.default_rng(2).standard_normal((16, 16, 16))
    c = fsc(v, v)
    np.testing.assert_allclose(c.correlation[~c.empty], 1.0, atol=1e-12)
    assert len(c) == 8


def test_fsc_negated_is_minus_one():
    v = np.random.default_rng(3).standard_normal((16, 16, 16))
    np.testing.assert_allclose(fsc(v, -v).correlation, -1.0, atol=1e-12)


def test_fsc_of_independent_noise_is_small():
    rng = np.random.default_rng(4)
    # 8 shells so that every shell past the first holds thousands of samples
    c = fsc(rng.standard_normal((64, 64, 64)), rng.standard_normal((64, 64, 64)), shells=8)
    assert np.abs(c.correlation[1:]).max() < 0.1


def test_fsc_shell_layout():
    c = fsc(np.ones((16, 16, 16)), np.ones((16, 16, 16)), shells=4)
    assert c.nyquist == pytest.approx(4.0)      # 0.5 / h with h = 2/16
    np.testing.assert_allclose(c.frequency, [0.5, 1.5, 2.5, 3.5])
    # a constant volume only has DC power
    assert not c.empty[0] and c.empty[1:].all()
    assert c.correlation[0] == pytest.approx(1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 10.0))
def test_fsc_symmetric_and_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 8, 8, 8))
    ab, ba = fsc(a, b).correlation, fsc(b, a).correlation
    np.testing.assert_allclose(ab, ba, atol=1e-12)
    np.testing.assert_allclose(fsc(scale * a, b).correlation, ab, atol=1e-12)
    assert np.all(np.abs(ab) <= 1.0 + 1e-12)


def test_fsc_shape_mismatch():
    with pytest.raises(ValueError):
        fsc(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))


def _curve(values, nyquist=1.0):
    values = np.asarray(values, dtype=float)
    n = values.size
    edges = np.linspace(0, nyquist, n + 1)
    return FscCurve(0.5 * (edges[:-1] + edges[1:]), values, np.zeros(n, bool), nyquist)


def test_resolution_never_crossing_is_nyquist():
    assert fsc_resolution(_curve([1.0] * 6, nyquist=3.0)) == 3.0


def test_resolution_interpolates_midpoint():
    c = _curve([1.0, 0.0])
    assert fsc_resolution(c, 0.5) == pytest.approx(0.5 * (c.frequency[0] + c.frequency[1]))


def test_resolution_threshold_validated():
    with pytest.raises(ValueError):
        fsc_resolution(_curve([1.0, 0.0]), 1.5)


def test_deformation_error_zero_for_truth():
    d = sample_deformations(10, (5, 0.05, 5), 0)
    assert deformation_error(d, d).as_row() == (0.0, 0.0, 0.0)


def test_deformation_error_three_four_five():
    est = DeformationParams.single(shift=(3.0, 4.0))
    assert deformation_error(est, DeformationParams.zeros(1)).shift_px == 5.0


def test_deformation_error_units():
    est = DeformationParams.single(shear=0.03, rotation=-2.0)
    err = deformation_error(est, DeformationParams.zeros(1))
    assert err.shear_pct == pytest.approx(3.0) and err.rotation_deg == 2.0


def test_init_row_magnitude_for_desk_bounds():
    # zeros vs uniform draws: E|s| Euclidean ~ 0.765 * bound, E|k| = bound / 2, E|a| = bound / 2
    d = sample_deformations(20_000, (5, 0.05, 5), 3)
    err = deformation_error(DeformationParams.zeros(len(d)), d)
    assert err.shift_px == pytest.approx(3.83, rel=0.02)
    assert err.shear_pct == pytest.approx(2.5, rel=0.02)
    assert err.rotation_deg == pytest.approx(2.5, rel=0.02)


def test_global_shift_removal():
    truth = sample_deformations(6, (5, 0, 0), 1)
    est = DeformationParams(truth.shift + [1.5, -0.5], truth.shear, truth.rotation)
    assert deformation_error(est, truth, remove_global_shift=True).shift_px == pytest.approx(0.0, abs=1e-12)
    assert deformation_error(est, truth).shift_px == pytest.approx(math.hypot(1.5, 0.5))


def test_length_mismatch():
    with pytest.raises(ValueError):
        deformation_error(DeformationParams.zeros(2), DeformationParams.zeros(3))
