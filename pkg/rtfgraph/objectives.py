"""
Differentiable training objectives.

Each objective maps the refined RTF features (M - 1, d) of one example to a
scalar on the tape:

    feature_mse  ||f - f_oracle||^2 / (M - 1)                  (minimize)
    sbf          signal blocking factor against oracle features (maximize)
    sisdr1       SI-SDR of the MVDR output vs the clean image    (maximize)
    sisdr2       SI-SDR of the MVDR output vs the oracle MVDR    (maximize)
    stoi         soft-clipped STOI of the MVDR output            (maximize)

The beamformer chain is features -> FFT -> MVDR (Hermitian solve,
quadratic form, division) -> beamforming -> ISTFT, each step a tape
primitive with an analytic adjoint. Complex adjoints follow
g = dL/dRe + i dL/dIm.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy import signal as ss

from rtfgraph import autodiff as ad
from rtfgraph import metrics
from rtfgraph.beamformer import DEGENERATE_GAIN
from rtfgraph.errors import ShapeError, SignalError
from rtfgraph.linalg_hermitian import cho_solve_batched, cholesky_batched
from rtfgraph.rtf_estimation import features_to_spectra
from rtfgraph.signal_core import StftConfig, overlap_add

logger = logging.getLogger(__name__)

DB_SCALE = 10.0 / np.log(10.0)
SOFT_CLIP_WIDTH = 0.1

MAXIMIZE = {"feature_mse": False, "sbf": True, "sisdr1": True, "sisdr2": True, "stoi": True}


@dataclass(frozen=True)
class LossValue:
    value: float
    maximize: bool
    diagnostics: Dict[str, float] = field(default_factory=dict)


@dataclass
class ObjectiveExample:
    """Everything an objective needs for one noisy training / validation example.

    noisy: STFT of the noisy mixture (L, K, M); chol: lower Cholesky factors
    of Phi_vv (K, M, M); clean_ref: reference-mic clean image after STFT
    analysis/synthesis; oracle_out: MVDR output steered by the oracle
    features; sbf_source: reference-mic clean image for the SBF filters.
    """

    noisy: np.ndarray
    chol: np.ndarray
    config: StftConfig
    ref_index: int
    l_uncausal: int
    oracle_features: np.ndarray
    clean_ref: Optional[np.ndarray] = None
    oracle_out: Optional[np.ndarray] = None
    sbf_source: Optional[np.ndarray] = None
    rate: int = 16000

    @classmethod
    def build(cls, noisy, phi_vv, config: StftConfig, ref_index: int, l_uncausal: int, oracle_features,
              clean_ref=None, sbf_source=None, rate: int = 16000) -> "ObjectiveExample":
        example = cls(noisy=np.asarray(noisy, dtype=np.complex128), chol=cholesky_batched(phi_vv), config=config,
                      ref_index=ref_index, l_uncausal=l_uncausal,
                      oracle_features=np.asarray(oracle_features, dtype=np.float64),
                      clean_ref=None if clean_ref is None else np.asarray(clean_ref, dtype=np.float64),
                      sbf_source=None if sbf_source is None else np.asarray(sbf_source, dtype=np.float64),
                      rate=rate)
        example.oracle_out = beamformer_output_array(example.oracle_features, example)
        return example


def rtf_spectrum(f: ad.Node, ref_index: int, bins: int, l_uncausal: int) -> ad.Node:
    """Features (M - 1, d) -> RTF spectra (K, M) with the reference column fixed to 1."""
    d = f.shape[-1]
    value = features_to_spectra(f.value, ref_index, bins, l_uncausal)

    def backward(g):
        g = np.delete(g, ref_index, axis=-1).T
        taps_bar = np.real(bins * np.fft.ifft(g, axis=-1))
        f_bar = np.empty(f.shape)
        f_bar[:, l_uncausal:] = taps_bar[:, :d - l_uncausal]
        f_bar[:, :l_uncausal] = taps_bar[:, bins - l_uncausal:]
        return (f_bar,)

    return f.tape.record(value, (f,), backward)


def mvdr(h: ad.Node, chol: np.ndarray, ref_index: int) -> ad.Node:
    """w = Phi^-1 h / Re(h^H Phi^-1 h); degenerate bins pass the reference mic with zero adjoint."""
    u = cho_solve_batched(chol, h.value)
    q = np.real(np.sum(h.value.conj() * u, axis=-1))
    bad = np.abs(q) < DEGENERATE_GAIN
    q_safe = np.where(bad, 1.0, q)
    w = u / q_safe[:, None]
    w[bad] = 0.0
    w[bad, ref_index] = 1.0

    def backward(g):
        g = np.where(bad[:, None], 0.0, g)
        u_bar = g / q_safe[:, None]
        q_bar = -np.real(np.sum(g.conj() * u, axis=-1)) / q_safe ** 2
        h_bar = q_bar[:, None] * u
        u_bar = u_bar + q_bar[:, None] * h.value
        h_bar = h_bar + cho_solve_batched(chol, u_bar)
        return (h_bar,)

    return h.tape.record(w, (h,), backward)


def beamform_istft(w: ad.Node, noisy: np.ndarray, cfg: StftConfig) -> ad.Node:
    """Time-domain output of y(l, k) = w(k)^H r(l, k) by overlap-add synthesis."""
    n_frames = noisy.shape[0]
    ws = cfg.synthesis_window()
    gain = cfg.cola_gain()
    y = np.einsum("km,lkm->lk", w.value.conj(), noisy)
    frames = np.real(np.fft.ifft(y, axis=1)) * ws
    value = overlap_add(frames[:, :, None], cfg.hop)[0] / gain

    def backward(g):
        segments = np.lib.stride_tricks.sliding_window_view(g, cfg.fft_len)[::cfg.hop][:n_frames]
        frames_bar = segments * ws / gain
        y_bar = np.fft.fft(frames_bar, axis=1) / cfg.fft_len
        return (np.einsum("lk,lkm->km", y_bar.conj(), noisy),)

    return w.tape.record(value, (w,), backward)


def beamformer_output(f: ad.Node, example: ObjectiveExample) -> ad.Node:
    h = rtf_spectrum(f, example.ref_index, example.config.bins, example.l_uncausal)
    return beamform_istft(mvdr(h, example.chol, example.ref_index), example.noisy, example.config)


def beamformer_output_array(features: np.ndarray, example: ObjectiveExample) -> np.ndarray:
    tape = ad.Tape()
    return beamformer_output(tape.constant(np.asarray(features, dtype=np.float64)), example).value


def si_sdr_node(est: ad.Node, ref: np.ndarray) -> ad.Node:
    """SI-SDR in dB against a constant reference; zero adjoint when clamped."""
    s = np.asarray(ref, dtype=np.float64)
    if s.shape != est.shape:
        raise ShapeError(f"SI-SDR reference {s.shape} does not match estimate {est.shape}")
    ref_energy = float(np.dot(s, s))
    if ref_energy == 0.0:
        raise SignalError("SI-SDR reference is all zeros")
    s_hat = est.value
    alpha = float(np.dot(s, s_hat)) / ref_energy
    p = alpha ** 2 * ref_energy
    e = float(np.sum((alpha * s - s_hat) ** 2))
    value = metrics.ratio_db(p, e)
    clamped = abs(value) >= metrics.DB_CLAMP

    def backward(g):
        if clamped:
            return (np.zeros_like(s_hat),)
        dp = 2.0 * alpha * s
        de = 2.0 * s_hat - dp
        return (g * DB_SCALE * (dp / p - de / e),)

    return est.tape.record(np.asarray(value), (est,), backward)


def sbf_node(f: ad.Node, oracle: np.ndarray, source: np.ndarray) -> ad.Node:
    """Signal blocking factor (mean over mics) as a function of the estimated features."""
    oracle = np.asarray(oracle, dtype=np.float64)
    if oracle.shape != f.shape:
        raise ShapeError(f"Oracle features {oracle.shape} do not match {f.shape}")
    n_mics, d = f.shape
    values, grads = [], []
    for mic in range(n_mics):
        x = ss.fftconvolve(oracle[mic], source)
        err = ss.fftconvolve(oracle[mic] - f.value[mic], source)
        energy, err_energy = float(np.sum(x ** 2)), float(np.sum(err ** 2))
        if energy == 0.0:
            raise SignalError(f"Oracle-filtered signal of mic {mic} has zero energy")
        value = metrics.ratio_db(energy, err_energy)
        values.append(value)
        if abs(value) >= metrics.DB_CLAMP:
            grads.append(np.zeros(d))
            continue
        e_bar = -DB_SCALE * 2.0 * err / err_energy / n_mics
        corr = ss.fftconvolve(e_bar, source[::-1])[source.size - 1:source.size - 1 + d]
        grads.append(-corr)
    grad = np.stack(grads)
    return f.tape.record(np.asarray(np.mean(values)), (f,), lambda g: (g * grad,))


class _StoiReference:
    """Reference-side constants of the soft STOI."""

    def __init__(self, ref: np.ndarray, rate: int):
        self.rate = rate
        self.n = ref.size
        x10 = metrics.resample_to_stoi_rate(ref, rate)
        self.starts = metrics.speech_frames(x10)
        if self.starts.size < metrics.STOI_SEGMENT:
            raise SignalError(f"Only {self.starts.size} speech frames; STOI needs at least {metrics.STOI_SEGMENT}")
        env = metrics.band_envelopes(x10, self.starts)
        n_seg = env.shape[0] - metrics.STOI_SEGMENT + 1
        self.seg_index = np.arange(n_seg)[:, None] + np.arange(metrics.STOI_SEGMENT)[None, :]
        xs = env[self.seg_index]
        self.x_norm = np.linalg.norm(xs, axis=1, keepdims=True)
        xc = xs - xs.mean(axis=1, keepdims=True)
        self.x_hat = xc / (np.linalg.norm(xc, axis=1, keepdims=True) + metrics.EPS)
        self.bound = xs * (1.0 + 10.0 ** (-metrics.STOI_BETA / 20.0))
        self.tau = SOFT_CLIP_WIDTH * self.bound + 1e-12 * max(float(self.bound.max()), metrics.EPS)
        self.power_floor = 1e-12 * max(float(np.max(env)) ** 2, metrics.EPS)


def soft_stoi_node(est: ad.Node, ref: np.ndarray, rate: int = 16000) -> ad.Node:
    """STOI with the hard clip replaced by c = a - tau * softplus((a - b) / tau)."""
    r = _StoiReference(np.asarray(ref, dtype=np.float64), rate)
    window = metrics.stoi_window()
    obm = metrics.third_octave_matrix()
    frame = metrics.STOI_FRAME
    nfft = metrics.STOI_NFFT

    y10 = metrics.resample_to_stoi_rate(est.value, rate)
    frames = np.stack([y10[s:s + frame] for s in r.starts]) * window
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    env = np.sqrt(np.abs(spec) ** 2 @ obm.T + r.power_floor)
    ys = env[r.seg_index]
    y_norm = np.linalg.norm(ys, axis=1, keepdims=True)
    denom = y_norm + metrics.EPS
    a = r.x_norm * ys / denom
    z = (a - r.bound) / r.tau
    c = a - r.tau * np.logaddexp(0.0, z)
    cc = c - c.mean(axis=1, keepdims=True)
    nc = np.linalg.norm(cc, axis=1, keepdims=True)
    inner = np.sum(r.x_hat * cc, axis=1, keepdims=True)
    corr = inner / (nc + metrics.EPS)
    value = float(np.mean(corr))

    def backward(g):
        count = corr.size
        safe_nc = np.where(nc > 0, nc, 1.0)
        dcc = (g / count) * (r.x_hat / (nc + metrics.EPS) - inner * cc / ((nc + metrics.EPS) ** 2 * safe_nc))
        dc = dcc - dcc.mean(axis=1, keepdims=True)
        da = dc * (1.0 - 1.0 / (1.0 + np.exp(-z)))
        safe_norm = np.where(y_norm > 0, y_norm, 1.0)
        proj = np.sum(da * ys, axis=1, keepdims=True)
        dys = r.x_norm * (da / denom - ys * proj / (safe_norm * denom ** 2))
        denv = np.zeros_like(env)
        np.add.at(denv, r.seg_index, dys)
        dpower = (denv / (2.0 * env)) @ obm
        dspec = 2.0 * dpower * spec
        padded = np.zeros((dspec.shape[0], nfft), dtype=np.complex128)
        padded[:, :dspec.shape[1]] = dspec
        frames_bar = np.real(nfft * np.fft.ifft(padded, axis=1))[:, :frame] * window
        dy10 = np.zeros_like(y10)
        for index, start in enumerate(r.starts):
            dy10[start:start + frame] += frames_bar[index]
        return (metrics.resample_adjoint(dy10, r.n, rate),)

    return est.tape.record(np.asarray(value), (est,), backward)


def loss_feature_mse(f: ad.Node, example: ObjectiveExample) -> ad.Node:
    diff = ad.sub(f, f.tape.constant(example.oracle_features))
    return ad.scale(ad.sum_squares(diff), 1.0 / f.shape[0])


def loss_sbf(f: ad.Node, example: ObjectiveExample) -> ad.Node:
    if example.sbf_source is None:
        raise SignalError("SBF objective needs the clean reference-mic image")
    return sbf_node(f, example.oracle_features, example.sbf_source)


def loss_sisdr_I(f: ad.Node, example: ObjectiveExample) -> ad.Node:
    if example.clean_ref is None:
        raise SignalError("SI-SDR I objective needs the clean reference")
    return si_sdr_node(beamformer_output(f, example), example.clean_ref)


def loss_sisdr_II(f: ad.Node, example: ObjectiveExample) -> ad.Node:
    return si_sdr_node(beamformer_output(f, example), example.oracle_out)


def loss_stoi(f: ad.Node, example: ObjectiveExample) -> ad.Node:
    if example.clean_ref is None:
        raise SignalError("STOI objective needs the clean reference")
    return soft_stoi_node(beamformer_output(f, example), example.clean_ref, example.rate)


OBJECTIVES: Dict[str, Callable[[ad.Node, ObjectiveExample], ad.Node]] = {
    "feature_mse": loss_feature_mse,
    "sbf": loss_sbf,
    "sisdr1": loss_sisdr_I,
    "sisdr2": loss_sisdr_II,
    "stoi": loss_stoi,
}


def objective(name: str) -> Callable[[ad.Node, ObjectiveExample], ad.Node]:
    if name not in OBJECTIVES:
        raise ValueError(f"Unknown objective {name!r}; expected one of {sorted(OBJECTIVES)}")
    return OBJECTIVES[name]


def training_loss(name: str):
    """Loss to minimize for gcn.train: maximized objectives are negated."""
    fn = objective(name)
    sign = -1.0 if MAXIMIZE[name] else 1.0

    def loss(tape: ad.Tape, output: ad.Node, example: ObjectiveExample) -> ad.Node:
        return ad.scale(fn(output, example), sign)

    return loss


def evaluate_objective(name: str, features: np.ndarray, example: ObjectiveExample) -> LossValue:
    tape = ad.Tape()
    value = objective(name)(tape.constant(np.asarray(features, dtype=np.float64)), example).value
    return LossValue(float(value), MAXIMIZE[name])


def objective_and_gradient(name: str, features: np.ndarray, example: ObjectiveExample) -> Tuple[float, np.ndarray]:
    """Objective value and its gradient with respect to the features."""
    tape = ad.Tape()
    f = tape.variable(np.asarray(features, dtype=np.float64))
    out = objective(name)(f, example)
    tape.backward(out)
    return float(out.value), f.grad
