"""Critical-band ear model, masking/noise patterns, and the noise-to-mask ratio.

The model follows the FFT-based basic-version ear model of BS.1387, adapted
to the 44.1 kHz / 1024-point STFT geometry used here: 109 critical bands of
0.25 Bark between 80 Hz and 18 kHz, outer/middle-ear weighting, level-
dependent frequency spreading, first-order temporal smearing, and a
frequency-dependent masking offset. One deliberate departure: noise patterns
are built from the squared magnitude of the complex spectral difference, not
the squared magnitude difference, so phase errors are penalized too.

All computations are float64; masking patterns span many orders of magnitude.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .audio import DEFAULT_STFT, SAMPLE_RATE, StftConfig, channels_to_complex

BAND_RESOLUTION_BARK = 0.25
BAND_MIN_HZ = 80.0
BAND_MAX_HZ = 18000.0
LISTENING_LEVEL_DB = 92.0

_LOWER_SLOPE_DB_PER_BARK = 27.0
_SUPERPOSITION_EXPONENT = 0.4
_TAU_MIN_S = 0.008
_TAU_100HZ_S = 0.030
_NMR_DB_FLOOR = 1e-12


def hz_to_bark(f):
    return 7.0 * np.arcsinh(np.asarray(f, dtype=np.float64) / 650.0)


def bark_to_hz(z):
    return 650.0 * np.sinh(np.asarray(z, dtype=np.float64) / 7.0)


def ear_weight_db(freq_hz):
    """Outer/middle-ear magnitude response in dB at the given frequencies."""
    k = np.asarray(freq_hz, dtype=np.float64) / 1000.0
    with np.errstate(divide="ignore"):
        w = (-0.6 * 3.64 * k ** -0.8
             + 6.5 * np.exp(-0.6 * (k - 3.3) ** 2)
             - 1e-3 * k ** 3.6)
    return w


@dataclass(frozen=True)
class EarModelTables:
    """Precomputed, immutable tables shared by all pattern computations."""

    sample_rate: int
    stft: StftConfig
    bin_hz: np.ndarray            # (F,) DFT bin center frequencies
    ear_weight: np.ndarray        # (F,) linear amplitude weight, 0 out of band
    band_map: np.ndarray          # (C, F) bin -> critical band decimation
    band_center_hz: np.ndarray    # (C,)
    band_center_bark: np.ndarray  # (C,)
    band_edges_hz: np.ndarray     # (C + 1,)
    masking_offset: np.ndarray    # (C,) linear power attenuation
    internal_noise: np.ndarray    # (C,) power floor added to pitch patterns
    time_spread_coeffs: np.ndarray  # (C,) per-frame smearing coefficients
    calibration_gain: float       # full-scale sine peak bin -> 92 dB SPL
    weighted_map: np.ndarray = field(repr=False, default=None)  # (C, F) U * (g*w)^2
    unit_spread: np.ndarray = field(repr=False, default=None)   # (C,) normalizer

    @property
    def num_bands(self) -> int:
        return self.band_map.shape[0]


def build_ear_tables(cfg: StftConfig = DEFAULT_STFT,
                     sample_rate: int = SAMPLE_RATE) -> EarModelTables:
    """Construct the deterministic ear-model tables for one STFT geometry."""
    f_bins = cfg.bins
    df = sample_rate / cfg.dft_length
    bin_hz = np.arange(f_bins) * df

    z_lo = float(hz_to_bark(BAND_MIN_HZ))
    z_hi = float(hz_to_bark(BAND_MAX_HZ))
    n_bands = int(np.ceil((z_hi - z_lo) / BAND_RESOLUTION_BARK - 1e-9))
    edges_bark = z_lo + BAND_RESOLUTION_BARK * np.arange(n_bands + 1)
    edges_hz = np.minimum(bark_to_hz(edges_bark), BAND_MAX_HZ)
    center_bark = z_lo + BAND_RESOLUTION_BARK * (np.arange(n_bands) + 0.5)
    center_hz = bark_to_hz(center_bark)

    # Band-pass rows from fractional bin/band overlap; bins are df wide and
    # centered on k*df. Columns are then normalized to unit sum.
    bin_lo = bin_hz - 0.5 * df
    bin_hi = bin_hz + 0.5 * df
    overlap = (np.minimum(edges_hz[1:, None], bin_hi[None, :])
               - np.maximum(edges_hz[:-1, None], bin_lo[None, :]))
    band_map = np.clip(overlap, 0.0, None) / df
    col = band_map.sum(axis=0)
    nonzero = col > 0
    band_map[:, nonzero] /= col[nonzero]

    in_range = (bin_hz >= BAND_MIN_HZ) & (bin_hz <= BAND_MAX_HZ)
    ear_w = np.where(in_range, 10.0 ** (ear_weight_db(bin_hz) / 20.0), 0.0)

    # Full-scale bin-centered sine peaks at sum(window)/2 in the STFT; scale
    # it to the 92 dB SPL listening level.
    peak = float(cfg.window.sum()) / 2.0
    gain = 10.0 ** (LISTENING_LEVEL_DB / 20.0) / peak

    offset_db = np.where(center_bark <= 12.0, 3.0, 0.25 * center_bark)
    masking_offset = 10.0 ** (-offset_db / 10.0)

    internal_noise = 10.0 ** (0.4 * 0.364 * (center_hz / 1000.0) ** -0.8)

    hop_s = cfg.hop / sample_rate
    tau = _TAU_MIN_S + (100.0 / center_hz) * (_TAU_100HZ_S - _TAU_MIN_S)
    time_coeffs = np.exp(-hop_s / tau)

    weighted = band_map * (gain * ear_w) ** 2

    tables = EarModelTables(
        sample_rate=sample_rate, stft=cfg, bin_hz=bin_hz, ear_weight=ear_w,
        band_map=band_map, band_center_hz=center_hz,
        band_center_bark=center_bark, band_edges_hz=edges_hz,
        masking_offset=masking_offset, internal_noise=internal_noise,
        time_spread_coeffs=time_coeffs, calibration_gain=gain,
        weighted_map=weighted,
        unit_spread=None,
    )
    unit = _spread_raw(np.ones((n_bands, 1)), tables)[:, 0]
    object.__setattr__(tables, "unit_spread", unit)
    for arr in (bin_hz, ear_w, band_map, center_hz, center_bark, edges_hz,
                masking_offset, internal_noise, time_coeffs, weighted, unit):
        arr.flags.writeable = False
    return tables


def _check_spec(spec: np.ndarray, tables: EarModelTables) -> np.ndarray:
    s = np.asarray(spec, dtype=np.float64)
    if s.ndim != 3 or s.shape[0] != 2 or s.shape[1] != tables.stft.bins:
        raise ValueError(f"expected (2, {tables.stft.bins}, T) spectrogram, "
                         f"got {s.shape}")
    return s


def pitch_patterns(host: np.ndarray, tables: EarModelTables) -> np.ndarray:
    """Ear-weighted host energy decimated to critical bands, (C, T)."""
    s = _check_spec(host, tables)
    mag2 = s[0] ** 2 + s[1] ** 2
    return tables.weighted_map @ mag2


def _spread_raw(energy: np.ndarray, tables: EarModelTables) -> np.ndarray:
    """Level-dependent spreading before unit normalization; energy is (C, T).

    Every band acts as a masker with a fixed 27 dB/Bark slope toward lower
    bands and a level- and frequency-dependent slope toward higher bands;
    contributions superpose under a 0.4 power law.
    """
    e = _SUPERPOSITION_EXPONENT
    dz = BAND_RESOLUTION_BARK
    c_bands = energy.shape[0]
    a_lower = 10.0 ** (-_LOWER_SLOPE_DB_PER_BARK * dz / 10.0)

    upper_base = 10.0 ** (-dz * (2.4 + 23.0 / tables.band_center_hz))
    a_upper = upper_base[:, None] * energy ** (0.2 * dz)

    idx = np.arange(c_bands)
    g_lower = ((1.0 - a_lower ** (idx + 1)) / (1.0 - a_lower))[:, None]
    span_up = (c_bands - idx)[:, None].astype(np.float64)
    near_one = np.abs(1.0 - a_upper) < 1e-12
    g_upper = np.where(near_one, span_up,
                       (1.0 - a_upper ** span_up) / np.where(near_one, 1.0, 1.0 - a_upper))
    masker = (energy / (g_lower + g_upper - 1.0)) ** e

    # lower side (own band included): backward scan with the fixed ratio
    acc = masker.copy()
    a_lower_e = a_lower ** e
    for c in range(c_bands - 2, -1, -1):
        acc[c] += a_lower_e * acc[c + 1]
    # upper side: each masker decays with its own level-dependent ratio
    a_upper_e = a_upper ** e
    reach = masker.copy()
    for d in range(1, c_bands):
        reach = reach[:c_bands - d] * a_upper_e[:c_bands - d]
        acc[d:] += reach
        a_upper_e = a_upper_e[:c_bands - d]
    return acc ** (1.0 / e)


def spread_frequency(pitch: np.ndarray, tables: EarModelTables) -> np.ndarray:
    """Simultaneous-masking spread across bands, normalized so that a flat
    unit pattern maps to itself."""
    p = np.asarray(pitch, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != tables.num_bands:
        raise ValueError("pattern grid must be (C, T)")
    return _spread_raw(p, tables) / tables.unit_spread[:, None]


def spread_time(excitation: np.ndarray, tables: EarModelTables) -> np.ndarray:
    """Forward temporal smearing: each band decays with its own coefficient,
    never dropping below the instantaneous excitation."""
    x = np.asarray(excitation, dtype=np.float64)
    a = tables.time_spread_coeffs
    out = np.empty_like(x)
    prev = np.zeros(x.shape[0])
    for t in range(x.shape[1]):
        prev = np.maximum(x[:, t], a * prev + (1.0 - a) * x[:, t])
        out[:, t] = prev
    return out


def masking_patterns(host: np.ndarray, tables: EarModelTables,
                     time_spread: bool = True) -> np.ndarray:
    """Masking thresholds of a host spectrogram, (C, T), strictly positive."""
    excitation = spread_frequency(
        pitch_patterns(host, tables) + tables.internal_noise[:, None], tables)
    if time_spread:
        excitation = spread_time(excitation, tables)
    return tables.masking_offset[:, None] * excitation


def noise_patterns(host: np.ndarray, marked: np.ndarray,
                   tables: EarModelTables) -> np.ndarray:
    """Band-decimated, ear-weighted energy of the complex spectral error."""
    h = _check_spec(host, tables)
    m = _check_spec(marked, tables)
    if h.shape != m.shape:
        raise ValueError("host/marked shape mismatch")
    d = h - m
    return tables.weighted_map @ (d[0] ** 2 + d[1] ** 2)


def nmr(host: np.ndarray, marked: np.ndarray, tables: EarModelTables,
        masking: np.ndarray | None = None) -> float:
    """Mean noise-to-mask ratio over all bands and frames (linear)."""
    if masking is None:
        masking = masking_patterns(host, tables)
    noise = noise_patterns(host, marked, tables)
    return float(np.mean(noise / masking))


def nmr_db(linear: float) -> float:
    """Linear ratio in decibels, floored at 1e-12 (-120 dB)."""
    if linear < 0:
        raise ValueError("linear NMR must be non-negative")
    return float(10.0 * np.log10(max(linear, _NMR_DB_FLOOR)))


def nmr_gradient(host: np.ndarray, marked: np.ndarray, tables: EarModelTables,
                 masking: np.ndarray | None = None) -> np.ndarray:
    """Gradient of nmr() with respect to the marked spectrogram channels.

    The masking patterns depend on the host alone, so they are constants
    here; the ratio is quadratic in the spectral error.
    """
    h = _check_spec(host, tables)
    m = _check_spec(marked, tables)
    if masking is None:
        masking = masking_patterns(host, tables)
    c_bands, t_frames = masking.shape
    inv_mask_bins = tables.weighted_map.T @ (1.0 / masking)  # (F, T)
    coeff = 2.0 / (c_bands * t_frames)
    return coeff * inv_mask_bins[None, :, :] * (m - h)


def write_pattern_csv(file, host: np.ndarray, marked: np.ndarray,
                      tables: EarModelTables, frame_offset: int = 0) -> None:
    """Dump (frame, band, pitch, mask, noise) rows for one host/marked pair."""
    pitch = pitch_patterns(host, tables)
    mask = masking_patterns(host, tables)
    noise = noise_patterns(host, marked, tables)
    writer = csv.writer(file)
    if frame_offset == 0:
        writer.writerow(["frame", "band", "pitch", "mask", "noise"])
    c_bands, t_frames = pitch.shape
    for t in range(t_frames):
        for c in range(c_bands):
            writer.writerow([frame_offset + t, c,
                             repr(float(pitch[c, t])), repr(float(mask[c, t])),
                             repr(float(noise[c, t]))])
