"""
Evaluation metrics: output SNR, SI-SDR, signal blocking factor (SBF), STOI
and ESTOI.

Every dB ratio is clamped to +/-150 dB. STOI follows the standard 10 kHz
pipeline: resampling, silent-frame removal on the reference (40 dB range),
512-point spectra of 256-sample Hann frames, 15 third-octave bands from
150 Hz, 30-frame segments and clipping at -15 dB signal-to-distortion.
"""

import logging
from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy import signal as ss

from rtfgraph.errors import ShapeError, SignalError
from rtfgraph.signal_core import Signal

logger = logging.getLogger(__name__)

DB_CLAMP = 150.0
EPS = np.finfo(np.float64).eps

STOI_RATE = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_HOP = 128
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0
RESAMPLE_UP, RESAMPLE_DOWN = 5, 8


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Signal) else np.asarray(x, dtype=np.float64)


def ratio_db(num: float, den: float) -> float:
    """10 log10(num / den) clamped to [-150, 150] dB."""
    if den <= 0.0:
        return DB_CLAMP
    if num <= 0.0:
        return -DB_CLAMP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CLAMP, DB_CLAMP))


def snr_out(s_hat, v_hat) -> float:
    """10 log10(||s_hat||^2 / ||v_hat||^2); zero noise clamps to 150 dB."""
    s_hat, v_hat = _samples(s_hat), _samples(v_hat)
    if s_hat.shape != v_hat.shape:
        raise ShapeError(f"snr_out lengths differ: {s_hat.shape} vs {v_hat.shape}")
    return ratio_db(float(np.sum(s_hat ** 2)), float(np.sum(v_hat ** 2)))


def si_sdr(s_ref, s_est) -> float:
    """Scale-invariant SDR of s_est against s_ref, in dB.

    Raises:
        SignalError: If the reference is all zeros
    """
    s_ref, s_est = _samples(s_ref), _samples(s_est)
    if s_ref.shape != s_est.shape:
        raise ShapeError(f"si_sdr lengths differ: {s_ref.shape} vs {s_est.shape}")
    ref_energy = float(np.dot(s_ref, s_ref))
    if ref_energy == 0.0:
        raise SignalError("si_sdr reference is all zeros")
    alpha = float(np.dot(s_ref, s_est)) / ref_energy
    target = alpha * s_ref
    return ratio_db(float(np.sum(target ** 2)), float(np.sum((target - s_est) ** 2)))


def _taps(h) -> np.ndarray:
    return np.atleast_2d(np.asarray(getattr(h, "taps", h), dtype=np.float64))


def sbf(h_oracle, h_est, s_ref) -> float:
    """Signal blocking factor, mean over non-reference mics.

    x_m = h_oracle_m * s and d_m = (h_oracle_m - h_est_m) * s; per mic
    10 log10(sum x^2 / sum d^2).

    Raises:
        SignalError: If an oracle-filtered signal has zero energy
    """
    oracle, est = _taps(h_oracle), _taps(h_est)
    if oracle.shape != est.shape:
        raise ShapeError(f"sbf feature shapes differ: {oracle.shape} vs {est.shape}")
    s = _samples(s_ref)
    values = []
    for mic in range(oracle.shape[0]):
        x = ss.fftconvolve(oracle[mic], s)
        d = ss.fftconvolve(oracle[mic] - est[mic], s)
        energy = float(np.sum(x ** 2))
        if energy == 0.0:
            raise SignalError(f"Oracle-filtered signal of mic {mic} has zero energy")
        values.append(ratio_db(energy, float(np.sum(d ** 2))))
    return float(np.mean(values))


@lru_cache(maxsize=4)
def resample_filter() -> np.ndarray:
    """120-tap anti-alias FIR at the 80 kHz intermediate rate (gain = up factor)."""
    return RESAMPLE_UP * ss.firwin(120, STOI_RATE / 2 / (16000 * RESAMPLE_UP / 2))


def resample_to_stoi_rate(x: np.ndarray, rate: int) -> np.ndarray:
    """16 kHz -> 10 kHz polyphase resampling (identity at 10 kHz)."""
    if rate == STOI_RATE:
        return np.asarray(x, dtype=np.float64).copy()
    if rate != 16000:
        raise SignalError(f"STOI supports 10000 or 16000 Hz input, got {rate}")
    return ss.upfirdn(resample_filter(), x, up=RESAMPLE_UP, down=RESAMPLE_DOWN)


def resample_adjoint(g: np.ndarray, n_in: int, rate: int) -> np.ndarray:
    """Adjoint of resample_to_stoi_rate for an input of n_in samples."""
    if rate == STOI_RATE:
        return np.asarray(g, dtype=np.float64).copy()
    h = resample_filter()
    n_up = (n_in - 1) * RESAMPLE_UP + 1
    stuffed = np.zeros(n_up + h.size - 1)
    stuffed[::RESAMPLE_DOWN][:g.size] = g
    upsampled = ss.fftconvolve(stuffed, h[::-1])[h.size - 1:h.size - 1 + n_up]
    return upsampled[::RESAMPLE_UP]


@lru_cache(maxsize=4)
def stoi_window() -> np.ndarray:
    return np.hanning(STOI_FRAME + 2)[1:-1]


@lru_cache(maxsize=4)
def third_octave_matrix() -> np.ndarray:
    """(15, 257) 0/1 band matrix with edges snapped to FFT bins."""
    freqs = np.linspace(0, STOI_RATE, STOI_NFFT + 1)[:STOI_NFFT // 2 + 1]
    k = np.arange(STOI_BANDS)
    low = STOI_MIN_FREQ * 2.0 ** ((2 * k - 1) / 6.0)
    high = STOI_MIN_FREQ * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((STOI_BANDS, freqs.size))
    for band in range(STOI_BANDS):
        lo_bin = int(np.argmin((freqs - low[band]) ** 2))
        hi_bin = int(np.argmin((freqs - high[band]) ** 2))
        obm[band, lo_bin:hi_bin] = 1.0
    return obm


def frame_starts(n: int) -> np.ndarray:
    return np.arange(0, n - STOI_FRAME + 1, STOI_HOP)


def speech_frames(x10: np.ndarray) -> np.ndarray:
    """Start indices of reference frames within 40 dB of the loudest frame."""
    starts = frame_starts(x10.size)
    if starts.size == 0:
        raise SignalError(f"Signal of {x10.size} samples at 10 kHz is shorter than one STOI frame")
    frames = np.stack([x10[s:s + STOI_FRAME] for s in starts]) * stoi_window()
    energies = 20.0 * np.log10(np.linalg.norm(frames, axis=1) + EPS)
    return starts[energies > energies.max() - STOI_DYN_RANGE]


def band_envelopes(x10: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Third-octave band magnitudes (frames, 15) of the given frames."""
    frames = np.stack([x10[s:s + STOI_FRAME] for s in starts]) * stoi_window()
    power = np.abs(np.fft.rfft(frames, n=STOI_NFFT, axis=1)) ** 2
    return np.sqrt(power @ third_octave_matrix().T)


def _stoi_envelopes(s_ref, s_est, rate: int) -> Tuple[np.ndarray, np.ndarray]:
    x, y = _samples(s_ref), _samples(s_est)
    if x.shape != y.shape:
        raise ShapeError(f"STOI lengths differ: {x.shape} vs {y.shape}")
    x10, y10 = resample_to_stoi_rate(x, rate), resample_to_stoi_rate(y, rate)
    starts = speech_frames(x10)
    if starts.size < STOI_SEGMENT:
        raise SignalError(f"Only {starts.size} speech frames; STOI needs at least {STOI_SEGMENT}")
    return band_envelopes(x10, starts), band_envelopes(y10, starts)


def segments(env: np.ndarray) -> np.ndarray:
    """Sliding 30-frame segments (S, 30, 15)."""
    return np.lib.stride_tricks.sliding_window_view(env, STOI_SEGMENT, axis=0).transpose(0, 2, 1)


def stoi(s_ref, s_est, rate: int = 16000) -> float:
    """Short-time objective intelligibility of s_est given the clean s_ref, in [0, 1]."""
    x_env, y_env = _stoi_envelopes(s_ref, s_est, rate)
    xs, ys = segments(x_env), segments(y_env)
    norm = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + EPS)
    clip = 10.0 ** (-STOI_BETA / 20.0)
    yp = np.minimum(ys * norm, xs * (1.0 + clip))
    xc = xs - xs.mean(axis=1, keepdims=True)
    yc = yp - yp.mean(axis=1, keepdims=True)
    xc = xc / (np.linalg.norm(xc, axis=1, keepdims=True) + EPS)
    yc = yc / (np.linalg.norm(yc, axis=1, keepdims=True) + EPS)
    value = float(np.mean(np.sum(xc * yc, axis=1)))
    return float(np.clip(value, 0.0, 1.0))


def _row_col_normalize(x: np.ndarray) -> np.ndarray:
    x = x - x.mean(axis=1, keepdims=True)
    x = x / (np.linalg.norm(x, axis=1, keepdims=True) + EPS)
    x = x - x.mean(axis=2, keepdims=True)
    return x / (np.linalg.norm(x, axis=2, keepdims=True) + EPS)


def estoi(s_ref, s_est, rate: int = 16000) -> float:
    """Extended STOI: spectral correlation of row/column normalized segments, in [0, 1]."""
    x_env, y_env = _stoi_envelopes(s_ref, s_est, rate)
    xn, yn = _row_col_normalize(segments(x_env)), _row_col_normalize(segments(y_env))
    value = float(np.sum(xn * yn) / STOI_SEGMENT / xn.shape[0])
    return float(np.clip(value, 0.0, 1.0))


def metric_table(s_ref, s_hat, v_hat, rate: int = 16000) -> dict:
    """Output SNR, SI-SDR, STOI and ESTOI of a shadow-filtered beamformer output."""
    s_hat_arr, v_hat_arr = _samples(s_hat), _samples(v_hat)
    estimate = s_hat_arr + v_hat_arr
    return {
        "snr_out": snr_out(s_hat_arr, v_hat_arr),
        "si_sdr": si_sdr(s_ref, estimate),
        "stoi": stoi(s_ref, estimate, rate),
        "estoi": estoi(s_ref, estimate, rate),
    }

