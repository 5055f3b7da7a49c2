"""
Time-domain and time-frequency signal primitives.

This module provides:
- FFT with a power-of-two guard
- STFT / ISTFT with COLA windows and overlap-add synthesis
- Linear convolution (direct or FFT based)
- Seeded test-signal generators (pink noise, speech-like bursts)
- SNR mixing measured on the reference channel
- WAV I/O for 16-bit PCM and 32-bit float files

Arrays follow one layout everywhere: multichannel time signals are
(channels, samples), time-frequency grids are (frames, bins, channels).
"""

import logging
import zlib
from dataclasses import dataclass
from typing import Literal, Optional, Tuple, Union

import numpy as np
import soundfile as sf
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import signal as ss

from rtfgraph.errors import ShapeError, SignalError

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000
PINK_NOISE_TAPS = 63
PCM_16_SCALE = 32768


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for a (seed, key...) stream.

    Args:
        seed (int): Global seed
        *keys: Extra stream identifiers (ints or strings)

    Returns:
        np.random.Generator: Generator that depends only on the arguments
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Signal:
    """Single-channel real signal."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeError(f"Signal samples must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise SignalError("Signal contains NaN or Inf samples")
        if int(self.sample_rate) <= 0:
            raise SignalError(f"Sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class MultichannelSignal:
    """M-microphone capture, stored as a (channels, samples) array."""

    data: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    ref_index: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ShapeError(f"Multichannel data must be (channels, samples), got shape {data.shape}")
        if data.shape[0] < 2:
            raise ShapeError(f"At least 2 channels are required, got {data.shape[0]}")
        if not 0 <= self.ref_index < data.shape[0]:
            raise ShapeError(f"Reference index {self.ref_index} outside [0, {data.shape[0]})")
        if not np.all(np.isfinite(data)):
            raise SignalError("Multichannel signal contains NaN or Inf samples")
        if int(self.sample_rate) <= 0:
            raise SignalError(f"Sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self):
        return [Signal(row, self.sample_rate) for row in self.data]

    @property
    def reference(self) -> Signal:
        return Signal(self.data[self.ref_index], self.sample_rate)

    def __len__(self):
        return self.data.shape[1]


class StftConfig(BaseModel):
    """STFT analysis/synthesis parameters (two-sided spectrum, K = fft_len)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    fft_len: int = 2048
    hop: int = 512
    window: Literal["hann", "sqrt_hann"] = "sqrt_hann"

    @model_validator(mode="after")
    def _check_cola(self):
        if not _is_power_of_two(self.fft_len):
            raise ValueError(f"fft_len must be a power of two, got {self.fft_len}")
        if self.hop <= 0 or self.fft_len % self.hop != 0:
            raise ValueError(f"hop {self.hop} must divide fft_len {self.fft_len}")
        hann = ss.get_window("hann", self.fft_len)
        if not ss.check_COLA(hann, self.fft_len, self.fft_len - self.hop):
            raise ValueError(f"{self.window} window is not COLA at hop {self.hop}")
        return self

    @property
    def bins(self) -> int:
        return self.fft_len

    def analysis_window(self) -> np.ndarray:
        hann = ss.get_window("hann", self.fft_len)
        return np.sqrt(hann) if self.window == "sqrt_hann" else hann

    def synthesis_window(self) -> np.ndarray:
        if self.window == "sqrt_hann":
            return np.sqrt(ss.get_window("hann", self.fft_len))
        return np.ones(self.fft_len)

    def cola_gain(self) -> float:
        """Constant sum of the shifted analysis*synthesis products."""
        product = self.analysis_window() * self.synthesis_window()
        return float(product.reshape(-1, self.hop).sum(axis=0).mean())

    def num_frames(self, n_samples: int) -> int:
        return (n_samples - self.fft_len) // self.hop + 1

    def output_length(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.fft_len


@dataclass(frozen=True)
class TFGrid:
    """Complex STFT of a multichannel signal, shape (frames, bins, channels)."""

    data: np.ndarray
    config: StftConfig

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.ndim != 3:
            raise ShapeError(f"TFGrid data must be (frames, bins, channels), got shape {data.shape}")
        if data.shape[1] != self.config.bins:
            raise ShapeError(f"TFGrid has {data.shape[1]} bins but config expects {self.config.bins}")
        object.__setattr__(self, "data", data)

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_channels(self) -> int:
        return self.data.shape[2]

    def scaled(self, factor) -> "TFGrid":
        return TFGrid(self.data * factor, self.config)


def fft(x, inverse: bool = False) -> np.ndarray:
    """DFT of a power-of-two length sequence (numpy convention, 1/N on the inverse).

    Args:
        x: Complex or real sequence
        inverse (bool): Compute the inverse transform

    Returns:
        np.ndarray: Complex transform of the same length

    Raises:
        SignalError: If the length is not a power of two
    """
    x = np.asarray(x)
    if x.ndim != 1 or not _is_power_of_two(x.shape[0]):
        raise SignalError(f"FFT length must be a power of two, got shape {x.shape}")
    return np.fft.ifft(x) if inverse else np.fft.fft(x)


def stft_array(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """STFT of a (channels, samples) array, returns (frames, bins, channels)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] < cfg.fft_len:
        raise SignalError(f"Signal of {x.shape[1]} samples is shorter than fft_len {cfg.fft_len}")
    n_frames = cfg.num_frames(x.shape[1])
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.fft_len, axis=-1)[:, ::cfg.hop][:, :n_frames]
    spectra = np.fft.fft(frames * cfg.analysis_window(), axis=-1)
    return np.ascontiguousarray(spectra.transpose(1, 2, 0))


def overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """Overlap-add real frames shaped (frames, frame_len, channels) into (channels, samples)."""
    n_frames, frame_len, n_channels = frames.shape
    out = np.zeros((n_channels, (n_frames - 1) * hop + frame_len))
    for index in range(n_frames):
        start = index * hop
        out[:, start:start + frame_len] += frames[index].T
    return out


def istft_array(data: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Overlap-add synthesis of a (frames, bins, channels) grid, returns (channels, samples)."""
    data = np.asarray(data)
    if data.ndim != 3 or data.shape[1] != cfg.fft_len:
        raise ShapeError(f"Grid shape {data.shape} does not match fft_len {cfg.fft_len}")
    frames = np.real(np.fft.ifft(data, axis=1)) * cfg.synthesis_window()[None, :, None]
    return overlap_add(frames, cfg.hop) / cfg.cola_gain()


def stft(sig: MultichannelSignal, cfg: StftConfig) -> TFGrid:
    """Short-time Fourier transform of every channel.

    Frames are windowed and phase-referenced to their first sample, giving
    L = floor((len - fft_len) / hop) + 1 frames.

    Args:
        sig (MultichannelSignal): Input capture
        cfg (StftConfig): Analysis parameters

    Returns:
        TFGrid: Grid of shape (L, K, M)

    Raises:
        SignalError: If the signal is shorter than fft_len
    """
    return TFGrid(stft_array(sig.data, cfg), cfg)


def istft(grid: TFGrid, cfg: StftConfig) -> Union[MultichannelSignal, Signal]:
    """Inverse STFT by windowed overlap-add.

    Output length is (L - 1) * hop + fft_len. Single-channel grids (for
    example a beamformer output) come back as a Signal.

    Raises:
        SignalError: If the grid was produced with a different configuration
    """
    if grid.config != cfg:
        raise SignalError(f"Grid config {grid.config} does not match {cfg}")
    out = istft_array(grid.data, cfg)
    if out.shape[0] == 1:
        return Signal(out[0])
    return MultichannelSignal(out)


def convolve(x, h):
    """Full linear convolution, length len(x) + len(h) - 1.

    Uses the FFT when both inputs are longer than 64 samples. A Signal input
    gives a Signal output at the same sample rate.
    """
    sample_rate = x.sample_rate if isinstance(x, Signal) else None
    x_arr = x.samples if isinstance(x, Signal) else np.asarray(x, dtype=np.float64)
    h_arr = h.samples if isinstance(h, Signal) else np.asarray(h, dtype=np.float64)
    if x_arr.size == 0 or h_arr.size == 0:
        raise SignalError("convolve requires non-empty inputs")
    if min(x_arr.size, h_arr.size) > 64:
        out = ss.fftconvolve(x_arr, h_arr)
    else:
        out = np.convolve(x_arr, h_arr)
    if sample_rate is not None:
        return Signal(out, sample_rate)
    return out


def _pink_filter(numtaps: int = PINK_NOISE_TAPS) -> np.ndarray:
    freqs = np.linspace(0.0, 1.0, 257)
    floor = 1.0 / numtaps
    gains = 1.0 / np.sqrt(np.maximum(freqs, floor))
    taps = ss.firwin2(numtaps, freqs, gains)
    return taps / np.linalg.norm(taps)


def gen_pink_noise(n: int, seed: int, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Signal:
    """Seeded pink noise: white Gaussian noise through a 63-tap 1/sqrt(f) FIR.

    Args:
        n (int): Number of samples
        seed (int): Generator seed
        sample_rate (int): Sample rate in Hz

    Returns:
        Signal: Pink noise with roughly unit variance
    """
    if n <= 0:
        raise SignalError(f"Number of samples must be positive, got {n}")
    taps = _pink_filter()
    white = derive_rng(seed, "pink").standard_normal(n + taps.size - 1)
    return Signal(np.convolve(white, taps, mode="valid"), sample_rate)


def gen_speech_like(n: int, seed: int, sample_rate: int = DEFAULT_SAMPLE_RATE,
                    lead_s: Tuple[float, float] = (0.45, 0.55),
                    burst_s: Tuple[float, float] = (0.5, 0.9),
                    gap_s: Tuple[float, float] = (0.15, 0.3),
                    syllable_hz: float = 4.0) -> Tuple[Signal, np.ndarray]:
    """Speech surrogate: syllable-modulated pink noise bursts separated by silences.

    The activity mask is 1 on burst samples and 0 elsewhere; the output is
    exactly zero wherever the mask is zero.

    Args:
        n (int): Number of samples
        seed (int): Generator seed
        sample_rate (int): Sample rate in Hz
        lead_s: Range of the leading silence in seconds
        burst_s: Range of burst durations in seconds
        gap_s: Range of silence durations between bursts in seconds
        syllable_hz (float): Envelope modulation rate

    Returns:
        tuple: (Signal, activity mask as uint8 array)
    """
    if n <= 0:
        raise SignalError(f"Number of samples must be positive, got {n}")
    rng = derive_rng(seed, "speech")
    carrier = gen_pink_noise(n, int(rng.integers(2**31)), sample_rate).samples
    envelope = np.zeros(n)
    mask = np.zeros(n, dtype=np.uint8)

    pos = int(rng.uniform(*lead_s) * sample_rate)
    while pos < n:
        burst = int(rng.uniform(*burst_s) * sample_rate)
        stop = min(pos + burst, n)
        t = np.arange(stop - pos) / sample_rate
        phase = rng.uniform(0.0, np.pi)
        envelope[pos:stop] = 0.2 + 0.8 * np.abs(np.sin(np.pi * syllable_hz * t + phase))
        mask[pos:stop] = 1
        pos = stop + int(rng.uniform(*gap_s) * sample_rate)

    active = mask.mean()
    logger.debug(f"Speech-like signal: {n} samples, active fraction {active:.3f}")
    return Signal(carrier * envelope, sample_rate), mask


def mix_at_snr(target: MultichannelSignal, noise: MultichannelSignal, snr_db: float,
               mask: Optional[np.ndarray] = None) -> Tuple[MultichannelSignal, float]:
    """Scale the noise so the reference-channel SNR equals snr_db.

    Energies are measured on the reference channel over the samples where
    mask is nonzero (all samples when mask is None).

    Returns:
        tuple: (mixture, noise_scale)

    Raises:
        ShapeError: If the shapes differ
        SignalError: If the target or the noise has zero energy
    """
    if target.data.shape != noise.data.shape:
        raise ShapeError(f"Target shape {target.data.shape} differs from noise shape {noise.data.shape}")
    select = np.ones(len(target), dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    ref = target.ref_index
    target_energy = float(np.sum(target.data[ref, select] ** 2))
    noise_energy = float(np.sum(noise.data[ref, select] ** 2))
    if target_energy == 0.0:
        raise SignalError("Target has zero energy on the reference channel")
    if noise_energy == 0.0:
        raise SignalError("Noise has zero energy on the reference channel")
    noise_scale = float(np.sqrt(target_energy / (noise_energy * 10.0 ** (snr_db / 10.0))))
    mixture = MultichannelSignal(target.data + noise_scale * noise.data, target.sample_rate, ref)
    return mixture, noise_scale


def wav_read(path) -> Union[MultichannelSignal, Signal]:
    """Read a 16-bit PCM or 32-bit float RIFF/WAVE file.

    Mono files come back as a Signal, multichannel files as a
    MultichannelSignal with reference channel 0.

    Raises:
        SignalError: On malformed headers, truncated files or other codecs
    """
    try:
        info = sf.info(str(path))
        if info.format != "WAV" or info.subtype not in ("PCM_16", "FLOAT"):
            raise SignalError(f"Unsupported WAV codec {info.format}/{info.subtype} in {path}")
        data, sample_rate = sf.read(str(path), dtype="float64", always_2d=True)
    except RuntimeError as e:
        raise SignalError(f"Cannot read WAV file {path}: {e}") from e
    if data.shape[1] == 1:
        return Signal(data[:, 0], sample_rate)
    return MultichannelSignal(data.T, sample_rate)


def wav_write(path, sig: Union[MultichannelSignal, Signal], subtype: Literal["FLOAT", "PCM_16"] = "FLOAT"):
    """Write a signal as a little-endian RIFF/WAVE file (FLOAT or PCM_16).

    PCM_16 samples are rounded to the nearest multiple of 2**-15 and clipped
    to [-1, 1 - 2**-15], the grid wav_read maps them back onto.
    """
    if subtype not in ("FLOAT", "PCM_16"):
        raise SignalError(f"Unsupported WAV subtype {subtype}")
    if isinstance(sig, Signal):
        data = sig.samples
    else:
        data = sig.data.T
    if subtype == "PCM_16":
        data = np.clip(np.round(data * PCM_16_SCALE), -PCM_16_SCALE, PCM_16_SCALE - 1).astype(np.int16)
    sf.write(str(path), data, sig.sample_rate, subtype=subtype, format="WAV", endian="LITTLE")
