import math

import numpy as np
import pytest

from nmwm import audio, losses, psycho
from nmwm.autodiff import numeric_grad, relative_error
from nmwm.losses import LossWeights


@pytest.fixture(scope="module")
def tables():
    return psycho.build_ear_tables()


@pytest.fixture(scope="module")
def spec_pair():
    rng = np.random.default_rng(0)
    t = np.arange(audio.SEGMENT_SAMPLES) / audio.SAMPLE_RATE
    seg = 0.3 * np.cos(2 * np.pi * 750.0 * t) + \
        0.02 * rng.standard_normal(t.size)
    host = audio.stft(seg)
    marked = host + 1e-3 * rng.standard_normal(host.shape)
    return host, marked


class TestBce:
    def test_uninformative_prediction(self):
        p = np.full(16, 0.5)
        m = np.random.default_rng(1).integers(0, 2, 16)
        assert losses.bce(p, m) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_perfect_prediction_clipped(self):
        m = np.array([1, 0, 1, 1, 0])
        assert losses.bce(m.astype(float), m) <= 1.2e-7

    def test_hand_value(self):
        value = losses.bce([0.9, 0.2], [1, 0])
        assert value == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2)
        assert value == pytest.approx(0.16425, abs=1e-5)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            losses.bce([0.5], [1, 0])

    def test_non_negative(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p = rng.uniform(0, 1, 32)
            m = rng.integers(0, 2, 32)
            assert losses.bce(p, m) >= 0.0

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(0.05, 0.95, 24)
        m = rng.integers(0, 2, 24).astype(float)
        g = losses.bce_gradient(p, m)
        numeric = numeric_grad(lambda q: losses.bce(q, m), [p], 0,
                               list(range(24)), step=1e-6)
        assert relative_error(g, numeric) < 1e-7

    def test_gradient_zero_in_clip_region(self):
        g = losses.bce_gradient([1e-9, 1.0 - 1e-9], [0, 1])
        assert np.all(g == 0.0)


class TestMseSpec:
    def test_identity(self, spec_pair):
        host, _ = spec_pair
        assert losses.mse_spec(host, host) == 0.0

    def test_single_entry(self):
        host = np.zeros((2, 513, 96))
        marked = host.copy()
        marked[1, 100, 50] = 2.0
        assert losses.mse_spec(host, marked) == \
            pytest.approx(4.0 / (2 * 513 * 96), rel=1e-12)
        assert losses.mse_spec(host, marked) == pytest.approx(4.061e-5,
                                                              abs=1e-8)

    def test_quadratic_scaling(self, spec_pair):
        host, marked = spec_pair
        base = losses.mse_spec(host, marked)
        scaled = losses.mse_spec(host, host + 5.0 * (marked - host))
        assert scaled == pytest.approx(25.0 * base, rel=1e-12)

    def test_gradient_matches_fd(self, spec_pair):
        host, marked = spec_pair
        g = losses.mse_spec_gradient(host, marked)
        rng = np.random.default_rng(4)
        coords = rng.integers(0, host.size, 30)
        numeric = numeric_grad(
            lambda m: losses.mse_spec(host, m.reshape(host.shape)),
            [marked.ravel()], 0, coords)
        assert relative_error(g.ravel()[coords], numeric) < 1e-7


class TestCombinedLoss:
    def test_alpha_zero_is_pure_bce(self, spec_pair, tables):
        host, marked = spec_pair
        p = np.array([0.7, 0.2, 0.9])
        m = np.array([1, 0, 1])
        value, g_marked, g_pred = losses.combined_loss(
            host, marked, p, m, LossWeights(0.0), "nmr", tables)
        assert value == pytest.approx(losses.bce(p, m))
        assert np.all(g_marked == 0.0)
        assert np.allclose(g_pred, losses.bce_gradient(p, m))

    def test_alpha_one_is_pure_distortion(self, spec_pair, tables):
        host, marked = spec_pair
        p = np.array([0.7, 0.2])
        m = np.array([1, 0])
        value, g_marked, g_pred = losses.combined_loss(
            host, marked, p, m, LossWeights(1.0), "nmr", tables)
        assert value == pytest.approx(psycho.nmr(host, marked, tables))
        assert np.all(g_pred == 0.0)
        assert np.any(g_marked != 0.0)

    def test_arithmetic_midpoint(self, tables):
        # alpha 0.5, distortion 0.02, bce 0.7 -> 0.36
        host = np.zeros((2, 513, 96))
        marked = host.copy()
        masking = np.ones((109, 96))
        # craft an error with mean N/M = 0.02
        nnz = (tables.band_map > 0).sum(axis=0)
        b = int(np.flatnonzero((nnz == 1) & (tables.ear_weight > 0))[0])
        c = int(np.argmax(tables.band_map[:, b]))
        marked[0, b, 0] = np.sqrt(0.02 * 109 * 96 /
                                  tables.weighted_map[c, b])
        p = np.full(8, 0.5)
        m = np.random.default_rng(5).integers(0, 2, 8)
        bce_v = losses.bce(p, m)
        assert bce_v == pytest.approx(math.log(2))
        value, _, _ = losses.combined_loss(
            host, marked, p, m, LossWeights(0.5), "nmr", tables,
            masking=masking)
        assert value == pytest.approx(0.5 * 0.02 + 0.5 * bce_v, rel=1e-9)

    def test_affine_in_alpha(self, spec_pair, tables):
        host, marked = spec_pair
        p = np.array([0.6, 0.3, 0.8, 0.1])
        m = np.array([1, 0, 1, 0])
        values = {}
        for alpha in (0.0, 0.5, 1.0):
            values[alpha], _, _ = losses.combined_loss(
                host, marked, p, m, LossWeights(alpha), "mse", tables)
        assert values[0.5] == pytest.approx(
            0.5 * (values[0.0] + values[1.0]), rel=1e-12)

    def test_gradients_match_fd_both_modes(self, spec_pair, tables):
        host, marked = spec_pair
        rng = np.random.default_rng(6)
        p = rng.uniform(0.1, 0.9, 16)
        m = rng.integers(0, 2, 16)
        masking = psycho.masking_patterns(host, tables)
        for mode in ("nmr", "mse"):
            value, g_marked, g_pred = losses.combined_loss(
                host, marked, p, m, LossWeights(0.35), mode, tables,
                masking=masking)
            coords = rng.integers(0, host.size, 12)

            def f_marked(flat):
                v, _, _ = losses.combined_loss(
                    host, flat.reshape(host.shape), p, m, LossWeights(0.35),
                    mode, tables, masking=masking)
                return v

            # the distortion term is exactly quadratic in the marked
            # spectrogram, so a large step avoids cancellation noise from
            # the constant BCE part without truncation error
            numeric = numeric_grad(f_marked, [marked.ravel()], 0, coords,
                                   step=1e-2)
            assert relative_error(g_marked.ravel()[coords], numeric) < 1e-5

            def f_pred(q):
                v, _, _ = losses.combined_loss(
                    host, marked, q, m, LossWeights(0.35), mode, tables,
                    masking=masking)
                return v

            numeric_p = numeric_grad(f_pred, [p], 0, list(range(16)),
                                     step=1e-6)
            assert relative_error(g_pred, numeric_p) < 1e-6

    def test_alpha_validation(self):
        with pytest.raises(ValueError):
            LossWeights(1.5)
        with pytest.raises(ValueError):
            LossWeights(-0.1)

    def test_unknown_mode(self, spec_pair, tables):
        host, marked = spec_pair
        with pytest.raises(ValueError):
            losses.combined_loss(host, marked, [0.5], [1], LossWeights(0.5),
                                 "mae", tables)
