import csv
import io

import numpy as np
import pytest

from nmwm import audio, psycho
from nmwm.audio import SEGMENT_SAMPLES
from nmwm.autodiff import numeric_grad, relative_error


@pytest.fixture(scope="module")
def tables():
    return psycho.build_ear_tables()


def tone_segment(freqs, amps, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    t = np.arange(SEGMENT_SAMPLES) / audio.SAMPLE_RATE
    x = np.zeros(SEGMENT_SAMPLES)
    for f, a in zip(freqs, amps):
        x += a * np.cos(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    if noise:
        x += noise * rng.standard_normal(SEGMENT_SAMPLES)
    return x


class TestEarTables:
    def test_band_count_matches_bark_span(self, tables):
        z = psycho.hz_to_bark
        count = (z(18000.0) - z(80.0)) / 0.25
        assert count == pytest.approx(108.97, abs=0.01)
        assert tables.num_bands == 109

    def test_column_sums_one_in_range(self, tables):
        cols = tables.band_map.sum(axis=0)
        in_range = (tables.bin_hz >= 80.0) & (tables.bin_hz <= 18000.0)
        assert np.max(np.abs(cols[in_range] - 1.0)) < 1e-9

    def test_entries_within_unit_interval(self, tables):
        assert tables.band_map.min() >= 0.0
        assert tables.band_map.max() <= 1.0 + 1e-12

    def test_rows_have_contiguous_support(self, tables):
        for row in tables.band_map:
            nz = np.flatnonzero(row)
            assert nz.size > 0
            assert np.all(np.diff(nz) == 1)

    def test_positive_tables(self, tables):
        assert np.all(tables.masking_offset > 0)
        assert np.all(tables.internal_noise > 0)
        assert np.all(np.isfinite(tables.ear_weight))
        assert np.all((tables.time_spread_coeffs > 0)
                      & (tables.time_spread_coeffs < 1))

    def test_out_of_range_bins_get_zero_weight(self, tables):
        assert np.all(tables.ear_weight[:2] == 0.0)   # below 80 Hz
        assert np.all(tables.ear_weight[418:] == 0.0)  # above 18 kHz
        assert np.all(tables.ear_weight[2:418] > 0.0)

    def test_runtime(self):
        import time
        start = time.time()
        psycho.build_ear_tables()
        assert time.time() - start < 1.0


class TestPitchPatterns:
    def test_zero_host(self, tables):
        p = psycho.pitch_patterns(np.zeros((2, 513, 96)), tables)
        assert p.shape == (109, 96)
        assert np.all(p == 0.0)

    def test_quadratic_in_amplitude(self, tables):
        spec = audio.stft(tone_segment([1000.0], [0.25]))
        p1 = psycho.pitch_patterns(spec, tables)
        p2 = psycho.pitch_patterns(2.0 * spec, tables)
        assert np.allclose(p2, 4.0 * p1)

    def test_single_bin_selects_band_column(self, tables):
        b = 200
        spec = np.zeros((2, 513, 96))
        spec[0, b, 10] = 1.0 / (tables.calibration_gain * tables.ear_weight[b])
        p = psycho.pitch_patterns(spec, tables)
        assert np.allclose(p[:, 10], tables.band_map[:, b])
        assert np.all(p[:, :10] == 0.0) and np.all(p[:, 11:] == 0.0)


class TestSpreadFrequency:
    def test_zero_maps_to_zero(self, tables):
        out = psycho.spread_frequency(np.zeros((109, 96)), tables)
        assert np.all(out == 0.0)

    def test_single_band_decays_both_sides(self, tables):
        e = np.zeros((109, 3))
        e[50, :] = 1e9
        out = psycho.spread_frequency(e, tables)
        assert np.all(out > 0.0)
        dB = 10 * np.log10(out[:, 1])
        assert np.all(np.diff(dB[:51]) > 0)        # rising toward the masker
        # decaying above it (the last band is skipped: the unit-pattern
        # normalizer dips at the spectrum edge)
        assert np.all(np.diff(dB[50:-1]) < 0)

    def test_monotone_in_input(self, tables):
        rng = np.random.default_rng(0)
        a = rng.uniform(0.0, 1e6, (109, 8))
        b = a * rng.uniform(1.0, 3.0, a.shape)
        sa = psycho.spread_frequency(a, tables)
        sb = psycho.spread_frequency(b, tables)
        assert np.all(sb >= sa - 1e-9 * np.abs(sa))

    def test_bump_never_decreases_outputs(self, tables):
        rng = np.random.default_rng(1)
        e = rng.uniform(0.0, 1e6, (109, 1))
        out = psycho.spread_frequency(e, tables)
        e2 = e.copy()
        e2[40, 0] *= 5.0
        out2 = psycho.spread_frequency(e2, tables)
        assert np.all(out2 >= out - 1e-9 * np.abs(out))

    def test_own_band_lower_bound(self, tables):
        rng = np.random.default_rng(2)
        e = rng.uniform(0.0, 1e9, (109, 4))
        out = psycho.spread_frequency(e, tables)
        c = np.arange(109)
        a_l = 10.0 ** (-2.7 * 0.25)
        g_lower = (1.0 - a_l ** (c + 1)) / (1.0 - a_l)
        # own contribution after the masker's two-sided normalization
        own = e / (g_lower[:, None] + 109 - c[:, None])
        assert np.all(out >= own / tables.unit_spread[:, None] - 1e-9)

    def test_flat_unit_pattern_is_fixed_point(self, tables):
        out = psycho.spread_frequency(np.ones((109, 2)), tables)
        assert np.allclose(out, 1.0, atol=1e-12)


class TestSpreadTime:
    def test_constant_input_unchanged(self, tables):
        e = np.outer(np.random.default_rng(3).uniform(1, 10, 109), np.ones(96))
        out = psycho.spread_time(e, tables)
        assert np.allclose(out, e)

    def test_impulse_decays_geometrically(self, tables):
        e = np.zeros((109, 10))
        e[:, 2] = 7.0
        out = psycho.spread_time(e, tables)
        a = tables.time_spread_coeffs
        assert np.allclose(out[:, 2], 7.0)
        for k in range(3, 10):
            assert np.allclose(out[:, k], 7.0 * a ** (k - 2))
        assert np.all(out <= 7.0 + 1e-12)
        assert np.all(out[:, :2] == 0.0)

    def test_zero(self, tables):
        assert np.all(psycho.spread_time(np.zeros((109, 96)), tables) == 0.0)


class TestMaskingPatterns:
    def test_silent_host_positive_and_time_constant(self, tables):
        m = psycho.masking_patterns(np.zeros((2, 513, 96)), tables)
        assert np.all(m > 0.0)
        assert np.allclose(m, m[:, :1])

    def test_mask_below_pitch_at_peaks(self, tables):
        seg = tone_segment([300.0, 1100.0, 2600.0], [0.4, 0.3, 0.2],
                           noise=0.01)
        spec = audio.stft(seg)
        pitch = psycho.pitch_patterns(spec, tables)
        mask = psycho.masking_patterns(spec, tables)
        t = 48
        for c in np.argsort(pitch[:, t])[-5:]:
            assert mask[c, t] < pitch[c, t]

    def test_louder_host_raises_masks(self, tables):
        seg = tone_segment([500.0, 1500.0], [0.2, 0.1], noise=0.02)
        spec = audio.stft(seg)
        m1 = psycho.masking_patterns(spec, tables)
        m2 = psycho.masking_patterns(2.0 * spec, tables)
        assert np.all(m2 >= m1 - 1e-9 * m1)
        assert np.mean(m2 / m1) > 1.5


class TestNoisePatterns:
    def test_equal_inputs_zero(self, tables):
        spec = audio.stft(tone_segment([800.0], [0.3]))
        n = psycho.noise_patterns(spec, spec, tables)
        assert np.all(n == 0.0)

    def test_quadratic_in_error(self, tables):
        rng = np.random.default_rng(4)
        host = audio.stft(tone_segment([800.0], [0.3]))
        err = rng.standard_normal(host.shape)
        n1 = psycho.noise_patterns(host, host + err, tables)
        n3 = psycho.noise_patterns(host, host + 3.0 * err, tables)
        assert np.allclose(n3, 9.0 * n1)

    def test_phase_rotation_is_counted(self, tables):
        # complex-difference noise sees a pure phase change; a magnitude
        # difference would not
        b, t, r, theta = 150, 40, 3.0, 0.7
        host = np.zeros((2, 513, 96))
        host[0, b, t] = r
        marked = np.zeros((2, 513, 96))
        marked[0, b, t] = r * np.cos(theta)
        marked[1, b, t] = r * np.sin(theta)
        n = psycho.noise_patterns(host, marked, tables)
        expected = 2.0 * r * r * (1.0 - np.cos(theta)) * \
            tables.weighted_map[:, b]
        assert np.allclose(n[:, t], expected)
        mag_diff = np.hypot(marked[0], marked[1]) - np.hypot(host[0], host[1])
        assert np.max(np.abs(mag_diff)) < 1e-12


class TestNmr:
    def test_identity_zero(self, tables):
        spec = audio.stft(tone_segment([700.0], [0.3]))
        assert psycho.nmr(spec, spec, tables) == 0.0

    def test_quadruples_with_doubled_error(self, tables):
        rng = np.random.default_rng(5)
        host = audio.stft(tone_segment([700.0], [0.3], noise=0.01))
        err = 1e-3 * rng.standard_normal(host.shape)
        v1 = psycho.nmr(host, host + err, tables)
        v2 = psycho.nmr(host, host + 2.0 * err, tables)
        assert v2 == pytest.approx(4.0 * v1, rel=1e-12)

    def test_single_cell_average(self, tables):
        # a bin wholly inside one band lights exactly one cell; with unit
        # masking the mean is 1 / (C * T)
        col_nnz = (tables.band_map > 0).sum(axis=0)
        b = int(np.flatnonzero((col_nnz == 1) & (tables.ear_weight > 0))[0])
        c = int(np.argmax(tables.band_map[:, b]))
        host = np.zeros((2, 513, 96))
        marked = np.zeros((2, 513, 96))
        marked[0, b, 5] = 1.0 / np.sqrt(tables.weighted_map[c, b])
        masking = np.ones((109, 96))
        value = psycho.nmr(host, marked, tables, masking=masking)
        assert value == pytest.approx(1.0 / (109 * 96), rel=1e-12)

    def test_nmr_db(self):
        assert psycho.nmr_db(1.0) == 0.0
        assert psycho.nmr_db(0.0) == pytest.approx(-120.0)
        assert psycho.nmr_db(0.015849) == pytest.approx(-18.0, abs=1e-3)
        assert 10.0 ** (psycho.nmr_db(0.01585) / 10.0) == \
            pytest.approx(0.01585, rel=1e-12)

    def test_permutation_invariance_without_time_spread(self, tables):
        rng = np.random.default_rng(6)
        host = audio.stft(tone_segment([900.0, 2100.0], [0.3, 0.2],
                                       noise=0.02))
        marked = host + 1e-3 * rng.standard_normal(host.shape)
        perm = rng.permutation(96)
        m_plain = psycho.masking_patterns(host, tables, time_spread=False)
        v1 = psycho.nmr(host, marked, tables, masking=m_plain)
        v2 = psycho.nmr(host[:, :, perm], marked[:, :, perm], tables,
                        masking=psycho.masking_patterns(host[:, :, perm],
                                                        tables,
                                                        time_spread=False))
        assert v2 == pytest.approx(v1, rel=1e-9)
        # with time spreading the invariance must generally break
        v3 = psycho.nmr(host, marked, tables)
        v4 = psycho.nmr(host[:, :, perm], marked[:, :, perm], tables)
        assert abs(v4 - v3) > 1e-12


class TestNmrGradient:
    def test_zero_at_identity(self, tables):
        spec = audio.stft(tone_segment([700.0], [0.3]))
        g = psycho.nmr_gradient(spec, spec, tables)
        assert np.all(g == 0.0)

    def test_linear_in_error(self, tables):
        rng = np.random.default_rng(7)
        host = audio.stft(tone_segment([700.0], [0.2], noise=0.01))
        err = 1e-3 * rng.standard_normal(host.shape)
        g1 = psycho.nmr_gradient(host, host + err, tables)
        g2 = psycho.nmr_gradient(host, host + 2.0 * err, tables)
        assert np.allclose(g2, 2.0 * g1)

    def test_matches_finite_differences(self, tables):
        rng = np.random.default_rng(8)
        host = audio.stft(tone_segment([500.0, 1700.0], [0.2, 0.1],
                                       noise=0.02))
        marked = host + 1e-3 * rng.standard_normal(host.shape)
        masking = psycho.masking_patterns(host, tables)
        grad = psycho.nmr_gradient(host, marked, tables, masking=masking)
        coords = rng.integers(0, host.size, size=50)

        def f(flat):
            return psycho.nmr(host, flat.reshape(host.shape), tables,
                              masking=masking)

        numeric = numeric_grad(f, [marked.ravel()], 0, coords, step=1e-6)
        assert relative_error(grad.ravel()[coords], numeric) < 1e-5


class TestPatternExport:
    def test_csv_rows(self, tables):
        host = audio.stft(tone_segment([600.0], [0.3]))
        marked = host + 1e-3
        buf = io.StringIO()
        psycho.write_pattern_csv(buf, host, marked, tables)
        rows = list(csv.reader(io.StringIO(buf.getvalue())))
        assert rows[0] == ["frame", "band", "pitch", "mask", "noise"]
        assert len(rows) == 1 + 109 * 96
        frame, band, pitch, mask, noise = rows[1]
        assert (frame, band) == ("0", "0")
        assert float(mask) > 0.0
        # values round-trip through repr
        pitch_grid = psycho.pitch_patterns(host, tables)
        assert float(pitch) == pitch_grid[0, 0]
