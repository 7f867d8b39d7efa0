from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rrfda.errors import ConfigurationError, DegenerateSegmentError, InputError
from rrfda.spectral import (
    BandDefinition,
    SegmentedRecording,
    _smooth,
    band_power,
    daniell_matrix,
    gcv_score,
    integrate_between,
    one_sided,
    periodogram,
    principal_power,
    region_band_powers,
    segment_fft,
    select_span,
    smooth_periodogram,
)

FS = 128.0


def tone_recording(amps, freqs, channels=3, seg_len=128, segments=4, noise=0.05, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(seg_len * segments) / FS
    sig = sum(a * np.sin(2 * np.pi * f * t) for a, f in zip(amps, freqs))
    data = sig[:, None] * rng.uniform(0.5, 1.5, channels)[None] + noise * rng.standard_normal((len(t), channels))
    return SegmentedRecording.from_continuous("s", 0, data, FS, seg_len)


@settings(max_examples=25, deadline=None)
@given(x=arrays(np.float64, (2, 33, 3), elements=st.floats(-1e3, 1e3)))
def test_parseval(x):
    rec = SegmentedRecording("s", 0, x, 64.0)
    d, _ = segment_fft(rec, center=False)
    lhs = np.sum(np.abs(d) ** 2, axis=0)  # (channels, segments)
    rhs = np.sum(x ** 2, axis=1)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-8, atol=1e-8 * max(1.0, rhs.max()))


def test_from_continuous_layout_and_trailing_samples():
    data = np.arange(23.0)[:, None] * np.array([1.0, -1.0])
    rec = SegmentedRecording.from_continuous("a", 1, data, 10.0, 5)
    assert rec.samples.shape == (2, 5, 4)
    np.testing.assert_array_equal(rec.samples[0, :, 1], [5, 6, 7, 8, 9])
    np.testing.assert_array_equal(rec.samples[1, :, 0], [0, -1, -2, -3, -4])
    with pytest.raises(InputError):
        SegmentedRecording.from_continuous("a", 1, data[:3], 10.0, 5)


def test_nonfinite_samples_rejected():
    x = np.zeros((1, 8, 2))
    x[0, 3, 1] = np.nan
    with pytest.raises(InputError):
        SegmentedRecording("s", 0, x, 10.0)


def test_one_sided_grid_even_and_odd():
    for n in (16, 17):
        _, f = one_sided(np.zeros((n, 1, 1)), np.fft.fftfreq(n, d=1 / 32))
        assert f[0] == 0 and np.all(np.diff(f) > 0)
        assert len(f) == n // 2 + 1
        assert f[-1] <= 16


def test_periodogram_hermitian_psd_rank_one():
    rec = tone_recording([1.0], [10.0])
    raw = periodogram(*segment_fft(rec))
    M = raw.matrices
    np.testing.assert_allclose(M, np.conj(np.swapaxes(M, -1, -2)), atol=1e-12)
    eig = np.linalg.eigvalsh(M)
    assert eig[..., 0].min() > -1e-9 * eig.max()
    # raw periodogram matrices are rank one
    assert np.all(eig[..., :-1] <= 1e-9 * eig.max())


def test_daniell_matrix_rows_sum_to_one_and_match_smoother():
    H = daniell_matrix(9, 5)
    np.testing.assert_allclose(H.sum(axis=1), 1.0)
    np.testing.assert_allclose(H[4], [0, 0, 0.2, 0.2, 0.2, 0.2, 0.2, 0, 0])
    # reflection excludes the edge point itself
    np.testing.assert_allclose(H[0], [0.2, 0.4, 0.4, 0, 0, 0, 0, 0, 0])
    x = np.random.default_rng(1).standard_normal((9, 1, 1, 1))
    np.testing.assert_allclose(_smooth(x, 5)[:, 0, 0, 0], H @ x[:, 0, 0, 0])


@pytest.mark.parametrize("span", [0, 2, 4])
def test_daniell_span_must_be_odd_positive(span):
    with pytest.raises(ConfigurationError):
        daniell_matrix(10, span)


def test_smoothed_matrices_hermitian_psd():
    rec = tone_recording([1.0, 0.5], [10.0, 30.0], channels=4)
    sm = smooth_periodogram(periodogram(*segment_fft(rec)), span=7)
    M = sm.matrices
    np.testing.assert_allclose(M, np.conj(np.swapaxes(M, -1, -2)), atol=1e-12)
    assert np.linalg.eigvalsh(M)[..., 0].min() > -1e-9 * np.abs(M).max()


def test_gcv_prefers_smoothing_for_white_noise():
    rng = np.random.default_rng(3)
    rec = SegmentedRecording("s", 0, rng.standard_normal((2, 256, 6)), FS)
    raw = periodogram(*segment_fft(rec))
    assert select_span(raw) > 1
    assert gcv_score(raw, 1) > gcv_score(raw, select_span(raw))


def test_principal_power_integrates_to_one():
    rec = tone_recording([1.0, 0.3], [10.0, 40.0])
    sm = smooth_periodogram(periodogram(*segment_fft(rec)))
    surf = principal_power(sm)
    np.testing.assert_allclose(np.trapezoid(surf.values, surf.frequencies, axis=0), 1.0, atol=1e-10)


def test_full_band_power_is_one():
    rec = tone_recording([1.0], [12.0])
    _, series = region_band_powers(rec, [BandDefinition("all", 0.0, FS / 2)])
    np.testing.assert_allclose(series[0].gamma, 1.0, atol=1e-12)


def test_stronger_tone_dominates_its_band():
    bands = [BandDefinition("alpha", 8, 15), BandDefinition("gamma", 30, 45)]
    _, s = region_band_powers(tone_recording([2.0, 0.5], [10.0, 38.0]), bands)
    assert np.all(s[0].gamma > s[1].gamma)
    _, s = region_band_powers(tone_recording([0.5, 2.0], [10.0, 38.0]), bands)
    assert np.all(s[0].gamma < s[1].gamma)


def test_zero_segment_is_degenerate():
    x = np.random.default_rng(0).standard_normal((2, 32, 3))
    x[:, :, 1] = 0.0
    with pytest.raises(DegenerateSegmentError):
        region_band_powers(SegmentedRecording("s", 0, x, 64.0), [BandDefinition("a", 1, 10)])


def test_band_floor_flags():
    rec = tone_recording([1.0], [10.0], noise=0.0)
    surf = principal_power(smooth_periodogram(periodogram(*segment_fft(rec)), span=1))
    bp = band_power(surf, BandDefinition("far", 50, 60), floor=1e-3)
    assert np.all(bp.floored)
    np.testing.assert_allclose(bp.log_gamma, np.log(1e-3))


def test_band_beyond_nyquist_rejected():
    surf = principal_power(smooth_periodogram(periodogram(*segment_fft(tone_recording([1], [10]))), span=3))
    with pytest.raises(ConfigurationError):
        band_power(surf, BandDefinition("hi", 50, 80))


def test_integrate_between_linear_exact():
    x = np.linspace(0, 10, 11)
    y = 2 * x + 1
    assert integrate_between(x, y, 2.5, 7.25) == pytest.approx((7.25 ** 2 + 7.25) - (2.5 ** 2 + 2.5))
    assert integrate_between(x, y, 11, 12) == 0.0


def test_band_order_independent_of_listing():
    rec = tone_recording([1.0, 1.0], [10.0, 20.0])
    a, b = BandDefinition("a", 8, 15), BandDefinition("b", 16, 25)
    _, s1 = region_band_powers(rec, [a, b])
    _, s2 = region_band_powers(rec, [b, a])
    np.testing.assert_array_equal(s1[0].gamma, s2[1].gamma)
