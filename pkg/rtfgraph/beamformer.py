"""
RTF-steered MVDR beamformer.

w(k) = Phi_vv^-1 h / (h^H Phi_vv^-1 h), computed through Cholesky solves.
Bins where the denominator vanishes fall back to the reference-channel
selector and are flagged in the status mask.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from rtfgraph.errors import ShapeError, SignalError
from rtfgraph.linalg_hermitian import solve_hermitian_batched
from rtfgraph.rtf_estimation import RTFSpectrum
from rtfgraph.signal_core import Signal, TFGrid, istft_array

logger = logging.getLogger(__name__)

DEGENERATE_GAIN = 1e-12


@dataclass(frozen=True)
class BeamWeights:
    """Per-bin weights w (K, M) and the degenerate-bin mask (K,)."""

    w: np.ndarray
    degenerate: np.ndarray

    @property
    def bins(self) -> int:
        return self.w.shape[0]


def reference_selector(bins: int, num_mics: int, ref_index: int) -> BeamWeights:
    """w = e_ref on every bin (the unprocessed reference microphone)."""
    w = np.zeros((bins, num_mics), dtype=np.complex128)
    w[:, ref_index] = 1.0
    return BeamWeights(w, np.zeros(bins, dtype=bool))


def mvdr_weights(h: Union[RTFSpectrum, np.ndarray], phi_vv: np.ndarray, ref_index: Optional[int] = None) -> BeamWeights:
    """MVDR weights for steering RTFs h (K, M) and noise covariances (K, M, M).

    Args:
        h: RTFSpectrum or (K, M) array
        phi_vv: Positive definite noise covariances
        ref_index (int): Reference mic for the fallback (taken from h when an RTFSpectrum)

    Returns:
        BeamWeights: Distortionless weights, fallback bins flagged
    """
    if isinstance(h, RTFSpectrum):
        ref_index = h.ref_index
        h = h.h
    h = np.asarray(h, dtype=np.complex128)
    phi_vv = np.asarray(phi_vv, dtype=np.complex128)
    if phi_vv.shape != h.shape + (h.shape[-1],):
        raise ShapeError(f"Noise covariances {phi_vv.shape} do not match RTFs {h.shape}")
    ref_index = 0 if ref_index is None else ref_index

    u = solve_hermitian_batched(phi_vv, h)
    gain = np.real(np.sum(h.conj() * u, axis=-1))
    degenerate = np.abs(gain) < DEGENERATE_GAIN
    w = u / np.where(degenerate, 1.0, gain)[:, None]
    if degenerate.any():
        logger.warning(f"{int(degenerate.sum())} MVDR bins fall back to the reference microphone")
        w[degenerate] = 0.0
        w[degenerate, ref_index] = 1.0
    return BeamWeights(w, degenerate)


def delay_and_sum_weights(h: np.ndarray) -> np.ndarray:
    """Distortionless delay-and-sum w = h / (h^H h)."""
    h = np.asarray(h, dtype=np.complex128)
    return h / np.sum(np.abs(h) ** 2, axis=-1, keepdims=True)


def beamform_array(w: np.ndarray, data: np.ndarray) -> np.ndarray:
    """y(l, k) = w(k)^H r(l, k) for data (L, K, M), returns (L, K)."""
    return np.einsum("km,lkm->lk", np.conj(w), data)


def apply_beamformer(w: BeamWeights, grid: TFGrid) -> TFGrid:
    """Single-channel output grid (L, K, 1)."""
    if grid.data.shape[1:] != w.w.shape:
        raise ShapeError(f"Weights {w.w.shape} do not match grid {grid.data.shape}")
    return TFGrid(beamform_array(w.w, grid.data)[:, :, None], grid.config)


def shadow_filter(w: BeamWeights, clean_grid: TFGrid, noise_grid: TFGrid) -> Tuple[Signal, Signal]:
    """Beamform the clean and noise components separately and resynthesize both.

    Raises:
        SignalError: If the grids use different STFT configurations
    """
    if clean_grid.config != noise_grid.config:
        raise SignalError("Clean and noise grids use different STFT configurations")
    cfg = clean_grid.config
    s_hat = istft_array(apply_beamformer(w, clean_grid).data, cfg)[0]
    v_hat = istft_array(apply_beamformer(w, noise_grid).data, cfg)[0]
    return Signal(s_hat), Signal(v_hat)
