"""WAV ingestion/emission, segmentation, and the fixed-geometry STFT.

All processing is mono at 44.1 kHz. Audio is cut into fixed 48640-sample
blocks (~1103 ms); their centered STFT with a 1024-point DFT and 50%
overlapping Hann windows is a 513x96 complex matrix, stored as two real
channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 44100
SEGMENT_SAMPLES = 48640


class AudioError(Exception):
    """Base class for audio data problems."""


class WavFormatError(AudioError):
    """Malformed RIFF container or unsupported codec."""


class SampleRateError(AudioError):
    """File sample rate differs from the required one."""


@dataclass(frozen=True)
class StftConfig:
    """Analysis geometry: DFT length, hop (must be half the DFT), centering."""

    dft_length: int = 1024
    hop: int = 512
    centered: bool = True

    def __post_init__(self):
        if self.hop * 2 != self.dft_length:
            raise ValueError("hop must equal dft_length / 2 (50% overlap)")

    @property
    def bins(self) -> int:
        return self.dft_length // 2 + 1

    @property
    def window(self) -> np.ndarray:
        return _hann_periodic(self.dft_length)

    def num_frames(self, length: int) -> int:
        if self.centered:
            if length % self.hop != 0:
                raise ValueError("centered framing requires hop | length")
            return length // self.hop + 1
        if length < self.dft_length:
            raise ValueError("signal shorter than one analysis window")
        return (length - self.dft_length) // self.hop + 1

    def signal_length(self, frames: int) -> int:
        if self.centered:
            return (frames - 1) * self.hop
        return (frames - 1) * self.hop + self.dft_length


DEFAULT_STFT = StftConfig()


@lru_cache(maxsize=8)
def _hann_periodic(n: int) -> np.ndarray:
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.flags.writeable = False
    return w


@lru_cache(maxsize=32)
def _ola_denominator(dft_length: int, hop: int, frames: int) -> np.ndarray:
    w2 = _hann_periodic(dft_length) ** 2
    den = np.zeros((frames - 1) * hop + dft_length)
    for t in range(frames):
        den[t * hop:t * hop + dft_length] += w2
    # Outer half-windows of the padded span are discarded after trimming, but
    # a floor keeps the division defined there.
    den[den < 1e-12] = 1e-12
    den.flags.writeable = False
    return den


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path, require_rate: int | None = SAMPLE_RATE):
    """Read a PCM or IEEE-float WAV as a mono float64 signal in [-1, 1].

    Stereo files are mixed by channel mean. Rejects files whose rate differs
    from ``require_rate`` (pass None to accept any rate unresampled).
    """
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy signals bad headers/codecs via ValueError
        raise WavFormatError(f"{path}: {exc}") from exc
    if require_rate is not None and rate != require_rate:
        raise SampleRateError(
            f"{path}: sample rate {rate} Hz, expected {require_rate} Hz")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        if x.shape[1] > 2:
            raise WavFormatError(f"{path}: {x.shape[1]} channels, want mono/stereo")
        x = x.mean(axis=1)
    return x, rate


def write_wav(path, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    """Write mono 16-bit PCM, saturating outside [-1, 1]."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype(np.int16)
    wavfile.write(path, rate, pcm)


# ---------------------------------------------------------------------------
# Segmentation


def segment_signal(signal: np.ndarray, pad_policy: str = "zero-pad-last"):
    """Split a signal into consecutive 48640-sample blocks.

    The trailing partial block is zero-padded ("zero-pad-last") or discarded
    ("drop-last"). An empty signal yields an empty list.
    """
    if pad_policy not in ("zero-pad-last", "drop-last"):
        raise ValueError(f"unknown pad policy {pad_policy!r}")
    x = np.asarray(signal, dtype=np.float64).ravel()
    n_full, rem = divmod(x.size, SEGMENT_SAMPLES)
    segments = [x[i * SEGMENT_SAMPLES:(i + 1) * SEGMENT_SAMPLES].copy()
                for i in range(n_full)]
    if rem and pad_policy == "zero-pad-last":
        tail = np.zeros(SEGMENT_SAMPLES)
        tail[:rem] = x[n_full * SEGMENT_SAMPLES:]
        segments.append(tail)
    return segments


# ---------------------------------------------------------------------------
# STFT / iSTFT
#
# Centered framing reflect-pads dft_length/2 samples on each side, so a
# 48640-sample segment yields 96 frames. The inverse is the least-squares
# weighted overlap-add (synthesis window = analysis window, normalized by the
# summed squared window), which reconstructs any consistent spectrogram
# exactly and projects inconsistent ones.


def _frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """(..., L) -> windowed frames (..., T, N)."""
    n = cfg.dft_length
    if cfg.centered:
        pad = [(0, 0)] * (x.ndim - 1) + [(n // 2, n // 2)]
        x = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(x, n, axis=-1)
    return frames[..., ::cfg.hop, :] * cfg.window


def _stft_complex(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """(..., L) real -> (..., F, T) complex."""
    spec = np.fft.rfft(_frame_signal(x, cfg), axis=-1)
    return np.swapaxes(spec, -1, -2)


def _istft_real(spec: np.ndarray, cfg: StftConfig, length: int | None = None) -> np.ndarray:
    """(..., F, T) complex -> (..., length) real, least-squares synthesis."""
    n, hop = cfg.dft_length, cfg.hop
    frames_t = np.swapaxes(spec, -1, -2)  # (..., T, F)
    t_count = frames_t.shape[-2]
    if length is None:
        length = cfg.signal_length(t_count)
    frames = np.fft.irfft(frames_t, n=n, axis=-1) * cfg.window
    buf = np.zeros(frames.shape[:-2] + ((t_count - 1) * hop + n,))
    for t in range(t_count):
        buf[..., t * hop:t * hop + n] += frames[..., t, :]
    buf /= _ola_denominator(n, hop, t_count)
    start = n // 2 if cfg.centered else 0
    return buf[..., start:start + length]


def _stft_adjoint(grad: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """Adjoint of the real-linear map signal -> 2-channel spectrogram.

    ``grad`` is (..., 2, F, T); returns (..., length).
    """
    n, hop = cfg.dft_length, cfg.hop
    c = grad[..., 0, :, :] + 1j * grad[..., 1, :, :]
    e = np.swapaxes(c, -1, -2).copy()  # (..., T, F)
    e[..., 1:-1] *= 0.5
    e[..., 0] = e[..., 0].real
    e[..., -1] = e[..., -1].real
    frames = n * np.fft.irfft(e, n=n, axis=-1) * cfg.window
    t_count = frames.shape[-2]
    buf = np.zeros(frames.shape[:-2] + ((t_count - 1) * hop + n,))
    for t in range(t_count):
        buf[..., t * hop:t * hop + n] += frames[..., t, :]
    if not cfg.centered:
        return buf[..., :length]
    p = n // 2
    out = buf[..., p:p + length].copy()
    # reflect-pad adjoint: fold the pad regions back onto their sources
    out[..., 1:p + 1] += buf[..., p - 1::-1]
    out[..., length - p - 1:length - 1] += buf[..., :p + length - 1:-1]
    return out


def _istft_adjoint(grad: np.ndarray, cfg: StftConfig, frames: int) -> np.ndarray:
    """Adjoint of the synthesis map 2-channel spectrogram -> signal.

    ``grad`` is (..., length); returns (..., 2, F, T).
    """
    n, hop = cfg.dft_length, cfg.hop
    span = (frames - 1) * hop + n
    buf = np.zeros(grad.shape[:-1] + (span,))
    start = n // 2 if cfg.centered else 0
    buf[..., start:start + grad.shape[-1]] = grad
    buf /= _ola_denominator(n, hop, frames)
    fr = np.lib.stride_tricks.sliding_window_view(buf, n, axis=-1)[..., ::hop, :]
    spec = np.fft.rfft(fr * cfg.window, axis=-1)  # (..., T, F)
    scale = np.full(cfg.bins, 2.0 / n)
    scale[0] = scale[-1] = 1.0 / n
    out = np.empty(grad.shape[:-1] + (2, cfg.bins, frames))
    out[..., 0, :, :] = np.swapaxes(spec.real * scale, -1, -2)
    out[..., 1, :, :] = np.swapaxes(spec.imag * scale, -1, -2)
    out[..., 1, 0, :] = 0.0  # irfft discards the imaginary DC/Nyquist parts
    out[..., 1, -1, :] = 0.0
    return out


def complex_to_channels(spec: np.ndarray) -> np.ndarray:
    return np.stack([spec.real, spec.imag], axis=-3)


def channels_to_complex(chans: np.ndarray) -> np.ndarray:
    return chans[..., 0, :, :] + 1j * chans[..., 1, :, :]


def stft(segment: np.ndarray, cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Segment -> real/imaginary channel spectrogram (2, F, T), float64."""
    x = np.asarray(segment, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft expects a 1-D segment")
    cfg.num_frames(x.size)  # validates the length/hop relation
    return complex_to_channels(_stft_complex(x, cfg))


def istft(spec: np.ndarray, cfg: StftConfig = DEFAULT_STFT,
          length: int | None = None) -> np.ndarray:
    """Channel spectrogram (2, F, T) -> time signal.

    For spectrograms that are not the STFT of any signal this returns the
    least-squares overlap-add synthesis.
    """
    s = np.asarray(spec, dtype=np.float64)
    if s.ndim != 3 or s.shape[0] != 2 or s.shape[1] != cfg.bins:
        raise ValueError(f"expected (2, {cfg.bins}, T) spectrogram, got {s.shape}")
    return _istft_real(channels_to_complex(s), cfg, length)


def snr_db(host: np.ndarray, marked: np.ndarray) -> float:
    """Time-domain SNR: 10*log10(host energy / error energy).

    Returns +inf when marked equals host exactly.
    """
    h = np.asarray(host, dtype=np.float64)
    m = np.asarray(marked, dtype=np.float64)
    if h.shape != m.shape:
        raise ValueError("host/marked length mismatch")
    sig = float(np.dot(h, h))
    if sig == 0.0:
        raise ValueError("host is identically zero")
    err = float(np.dot(h - m, h - m))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(sig / err)
