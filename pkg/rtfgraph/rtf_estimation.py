"""
Relative transfer function (RTF) estimation.

Spatial covariances are estimated from labeled STFT frames, the RTF of each
bin is read off the top generalized eigenvector of (Phi_rr, Phi_vv) and
normalized to the reference microphone, and RTFs are converted to and from
truncated time-domain feature vectors of length d = l_uncausal + l_causal.
"""

import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from rtfgraph.errors import ShapeError, SignalError
from rtfgraph.linalg_hermitian import gevd_top_batched, hermitize
from rtfgraph.signal_core import StftConfig, TFGrid

logger = logging.getLogger(__name__)

DIAGONAL_LOADING = 1e-6
DEGENERATE_REF = 1e-12
NPM_FLOOR_DB = -150.0


class FrameLabel(IntEnum):
    DISCARD = -1
    NOISE_ONLY = 0
    NOISY = 1


class FeatureConfig(BaseModel):
    """Truncation window of the time-domain RTF around lag 0."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    l_uncausal: int = Field(default=128, ge=0)
    l_causal: int = Field(default=256, ge=1)

    @property
    def d(self) -> int:
        return self.l_uncausal + self.l_causal


@dataclass(frozen=True)
class CovariancePair:
    """Per-bin covariances, shapes (K, M, M)."""

    phi_rr: np.ndarray
    phi_vv: np.ndarray
    n_noisy: int
    n_noise: int


@dataclass(frozen=True)
class RTFSpectrum:
    """Per-bin RTF vectors h (K, M) with h[:, ref_index] == 1."""

    h: np.ndarray
    ref_index: int

    def __post_init__(self):
        h = np.array(self.h, dtype=np.complex128)
        if h.ndim != 2:
            raise ShapeError(f"RTF spectrum must be (bins, mics), got shape {h.shape}")
        h[:, self.ref_index] = 1.0
        object.__setattr__(self, "h", h)

    @property
    def bins(self) -> int:
        return self.h.shape[0]

    @property
    def num_mics(self) -> int:
        return self.h.shape[1]


@dataclass(frozen=True)
class RTFFeature:
    """Truncated time-domain RTFs of the non-reference mics, shape (M - 1, d)."""

    taps: np.ndarray
    ref_index: int
    l_uncausal: int
    l_causal: int

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.shape[1] != self.l_uncausal + self.l_causal:
            raise ShapeError(f"Feature shape {taps.shape} does not match d={self.l_uncausal + self.l_causal}")
        if not np.all(np.isfinite(taps)):
            raise SignalError("RTF feature has non-finite taps")
        object.__setattr__(self, "taps", taps)

    @property
    def num_mics(self) -> int:
        return self.taps.shape[0] + 1


def label_frames(mask: np.ndarray, cfg: StftConfig, n_samples: int = None) -> np.ndarray:
    """Frame labels from a sample activity mask.

    A frame is noise-only with < 10% active samples, noisy with > 90%, and
    discarded otherwise. Frames reaching past the end of the mask (when the
    analysed signal is longer, for example a reverberant tail) are discarded.

    Args:
        mask: Activity mask of the dry excitation
        cfg (StftConfig): STFT configuration of the analysed grid
        n_samples (int): Length of the analysed signal (defaults to len(mask))

    Returns:
        np.ndarray: int8 labels, one per frame
    """
    mask = np.asarray(mask, dtype=np.float64)
    n_samples = mask.shape[0] if n_samples is None else n_samples
    n_frames = cfg.num_frames(n_samples)
    padded = np.full(max(n_samples, mask.shape[0]), np.nan)
    padded[:mask.shape[0]] = mask
    starts = np.arange(n_frames) * cfg.hop
    windows = np.lib.stride_tricks.sliding_window_view(padded, cfg.fft_len)[starts]
    active = windows.mean(axis=1)
    labels = np.full(n_frames, FrameLabel.DISCARD, dtype=np.int8)
    labels[active < 0.1] = FrameLabel.NOISE_ONLY
    labels[active > 0.9] = FrameLabel.NOISY
    return labels


def _frame_covariance(data: np.ndarray) -> np.ndarray:
    return hermitize(np.einsum("lkm,lkn->kmn", data, data.conj()) / data.shape[0])


def estimate_covariances(grid: TFGrid, labels: np.ndarray, loading: float = DIAGONAL_LOADING) -> CovariancePair:
    """Phi_rr over noisy frames and diagonally loaded Phi_vv over noise-only frames.

    Raises:
        SignalError: If a class has fewer frames than microphones
    """
    labels = np.asarray(labels)
    if labels.shape[0] != grid.num_frames:
        raise ShapeError(f"{labels.shape[0]} labels for {grid.num_frames} frames")
    noisy = grid.data[labels == FrameLabel.NOISY]
    noise = grid.data[labels == FrameLabel.NOISE_ONLY]
    m = grid.num_channels
    if min(noisy.shape[0], noise.shape[0]) < m:
        raise SignalError(f"Need at least M={m} noisy and noise-only frames, got {noisy.shape[0]} and {noise.shape[0]}")
    phi_rr = _frame_covariance(noisy)
    phi_vv = _frame_covariance(noise)
    trace = np.real(np.trace(phi_vv, axis1=1, axis2=2))
    phi_vv = phi_vv + (loading * trace / m)[:, None, None] * np.eye(m)
    return CovariancePair(phi_rr, phi_vv, noisy.shape[0], noise.shape[0])


def _fill_degenerate(h: np.ndarray, bad: np.ndarray, ref_index: int) -> np.ndarray:
    if not bad.any():
        return h
    good = np.flatnonzero(~bad)
    logger.warning(f"{int(bad.sum())} degenerate RTF bins filled by interpolation")
    if good.size == 0:
        h = np.zeros_like(h)
        h[:, ref_index] = 1.0
        return h
    bins = np.arange(h.shape[0])
    for mic in range(h.shape[1]):
        h[bad, mic] = (np.interp(bins[bad], good, h[good, mic].real)
                       + 1j * np.interp(bins[bad], good, h[good, mic].imag))
    return h


def rtf_from_pencil(phi_rr: np.ndarray, phi_vv: np.ndarray, ref_index: int) -> RTFSpectrum:
    """h(k) = Phi_vv phi / (Phi_vv phi)_ref for the top eigenvector phi of each bin."""
    _, phi = gevd_top_batched(phi_rr, phi_vv)
    v = np.einsum("kmn,kn->km", phi_vv, phi)
    ref = v[:, ref_index]
    bad = np.abs(ref) < DEGENERATE_REF * np.linalg.norm(v, axis=1)
    h = v / np.where(bad, 1.0, ref)[:, None]
    h = _fill_degenerate(h, bad, ref_index)
    return RTFSpectrum(h, ref_index)


def estimate_rtf_gevd(cov: CovariancePair, ref_index: int) -> RTFSpectrum:
    """RTF by the generalized eigenvector of (Phi_rr, Phi_vv)."""
    return rtf_from_pencil(cov.phi_rr, cov.phi_vv, ref_index)


def estimate_rtf_clean(grid: TFGrid, labels: np.ndarray, ref_index: int) -> RTFSpectrum:
    """RTF by the principal eigenvector of Phi_rr (Phi_vv replaced by I)."""
    labels = np.asarray(labels)
    noisy = grid.data[labels == FrameLabel.NOISY]
    if noisy.shape[0] == 0:
        raise SignalError("Need at least one speech-active frame for the clean RTF")
    phi_rr = _frame_covariance(noisy)
    identity = np.broadcast_to(np.eye(grid.num_channels, dtype=np.complex128), phi_rr.shape)
    return rtf_from_pencil(phi_rr, identity, ref_index)


def spectra_to_features(h: np.ndarray, ref_index: int, l_uncausal: int, l_causal: int) -> np.ndarray:
    """Batched rtf_to_feature: (..., K, M) complex -> (..., M - 1, d) real."""
    t = np.real(np.fft.ifft(h, axis=-2))
    t = np.delete(t, ref_index, axis=-1)
    window = np.concatenate([t[..., t.shape[-2] - l_uncausal:, :], t[..., :l_causal, :]], axis=-2)
    return np.swapaxes(window, -1, -2)


def features_to_taps(f: np.ndarray, bins: int, l_uncausal: int) -> np.ndarray:
    """Place (..., M - 1, d) features into length-K impulse responses with the uncausal block wrapped."""
    f = np.asarray(f, dtype=np.float64)
    d = f.shape[-1]
    if d > bins:
        raise ShapeError(f"Feature length {d} exceeds {bins} bins")
    taps = np.zeros(f.shape[:-1] + (bins,))
    taps[..., :d - l_uncausal] = f[..., l_uncausal:]
    if l_uncausal:
        taps[..., bins - l_uncausal:] = f[..., :l_uncausal]
    return taps


def features_to_spectra(f: np.ndarray, ref_index: int, bins: int, l_uncausal: int) -> np.ndarray:
    """Batched feature_to_rtf: (..., M - 1, d) -> (..., K, M) with the reference column 1."""
    spectra = np.fft.fft(features_to_taps(f, bins, l_uncausal), axis=-1)
    spectra = np.swapaxes(spectra, -1, -2)
    return np.insert(spectra, ref_index, 1.0, axis=-1)


def rtf_to_feature(h: RTFSpectrum, l_uncausal: int, l_causal: int) -> RTFFeature:
    """Truncate the time-domain RTFs to lags [-l_uncausal, l_causal)."""
    if h.bins < l_uncausal + l_causal:
        raise ShapeError(f"{h.bins} bins cannot hold a feature of length {l_uncausal + l_causal}")
    taps = spectra_to_features(h.h, h.ref_index, l_uncausal, l_causal)
    return RTFFeature(taps, h.ref_index, l_uncausal, l_causal)


def feature_to_rtf(f: RTFFeature, bins: int) -> RTFSpectrum:
    """Zero-pad to K taps (uncausal block wrapped to the tail) and transform each mic."""
    return RTFSpectrum(features_to_spectra(f.taps, f.ref_index, bins, f.l_uncausal), f.ref_index)


def fold_airs(airs: np.ndarray, bins: int) -> np.ndarray:
    """Time-alias (..., air_len) AIRs to K samples so their K-point DFT samples the DTFT."""
    airs = np.asarray(airs, dtype=np.float64)
    blocks = -(-airs.shape[-1] // bins)
    padded = np.zeros(airs.shape[:-1] + (blocks * bins,))
    padded[..., :airs.shape[-1]] = airs
    return padded.reshape(airs.shape[:-1] + (blocks, bins)).sum(axis=-2)


def air_ratio_spectrum(airs: np.ndarray, ref_index: int, bins: int) -> RTFSpectrum:
    """Ground-truth RTF a_m(k) / a_ref(k) from (M, air_len) AIRs."""
    atf = np.fft.fft(fold_airs(airs, bins), axis=-1).T
    ref = atf[:, ref_index]
    bad = np.abs(ref) < DEGENERATE_REF * np.linalg.norm(atf, axis=1)
    h = atf / np.where(bad, 1.0, ref)[:, None]
    return RTFSpectrum(_fill_degenerate(h, bad, ref_index), ref_index)


def air_ratio_feature(airs: np.ndarray, ref_index: int, bins: int, l_uncausal: int, l_causal: int) -> RTFFeature:
    """Ground-truth RTF feature from the AIRs of one position."""
    return rtf_to_feature(air_ratio_spectrum(airs, ref_index, bins), l_uncausal, l_causal)


def truncation_energy_capture(h: RTFSpectrum, l_uncausal: int, l_causal: int) -> float:
    """Mean fraction of non-reference time-domain RTF energy inside the feature window."""
    t = np.delete(np.real(np.fft.ifft(h.h, axis=0)), h.ref_index, axis=1)
    energy = np.sum(t ** 2, axis=0)
    inside = np.sum(t[:l_causal] ** 2, axis=0) + (np.sum(t[h.bins - l_uncausal:] ** 2, axis=0) if l_uncausal else 0.0)
    return float(np.mean(inside / np.maximum(energy, np.finfo(float).tiny)))


def _vectors(h: Union[RTFFeature, RTFSpectrum, np.ndarray]) -> np.ndarray:
    if isinstance(h, RTFFeature):
        return h.taps
    if isinstance(h, RTFSpectrum):
        return np.delete(h.h, h.ref_index, axis=1).T
    return np.atleast_2d(np.asarray(h))


def npm(h_est, h_true) -> Tuple[np.ndarray, float]:
    """Normalized projection misalignment per non-reference mic, in dB.

    NPM = 20 log10(||h - (<h_est, h> / <h_est, h_est>) h_est|| / ||h||),
    floored at -150 dB.

    Returns:
        tuple: (per-mic values, mean)

    Raises:
        SignalError: If a reference vector is zero
    """
    est = _vectors(h_est)
    true = _vectors(h_true)
    if est.shape != true.shape:
        raise ShapeError(f"NPM shapes differ: {est.shape} vs {true.shape}")
    true_norm = np.linalg.norm(true, axis=-1)
    if np.any(true_norm == 0):
        raise SignalError("NPM reference vector is zero")
    inner = np.sum(est.conj() * true, axis=-1)
    power = np.sum(np.abs(est) ** 2, axis=-1)
    alpha = np.where(power > 0, inner / np.where(power > 0, power, 1.0), 0.0)
    residual = np.linalg.norm(true - alpha[..., None] * est, axis=-1)
    with np.errstate(divide="ignore"):
        values = 20.0 * np.log10(residual / true_norm)
    values = np.maximum(values, NPM_FLOOR_DB)
    return values, float(np.mean(values))
