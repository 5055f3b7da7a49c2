import numpy as np
import pytest

from rtfgraph.errors import ShapeError, SignalError
from rtfgraph.rtf_estimation import (FrameLabel, RTFFeature, RTFSpectrum, air_ratio_feature, air_ratio_spectrum,
                                     estimate_covariances, estimate_rtf_clean, estimate_rtf_gevd, feature_to_rtf,
                                     features_to_spectra, label_frames, npm, rtf_from_pencil, rtf_to_feature,
                                     spectra_to_features, truncation_energy_capture)
from rtfgraph.room_sim import RoomSpec, image_source_air, render_airs
from rtfgraph.signal_core import (MultichannelSignal, StftConfig, TFGrid, convolve, gen_pink_noise, gen_speech_like,
                                  stft)


def random_rtf(rng, bins=64, mics=4, ref=1):
    h = rng.standard_normal((bins, mics)) + 1j * rng.standard_normal((bins, mics))
    return RTFSpectrum(h, ref)


def random_pd_stack(rng, bins, mics):
    x = rng.standard_normal((bins, mics, mics)) + 1j * rng.standard_normal((bins, mics, mics))
    return x @ np.swapaxes(x, -1, -2).conj() + np.eye(mics)


def test_label_frames_thresholds(toy_stft):
    mask = np.zeros(600)
    mask[200:400] = 1
    labels = label_frames(mask, toy_stft)
    starts = np.arange(labels.size) * toy_stft.hop
    assert labels[0] == FrameLabel.NOISE_ONLY
    assert labels[list(starts).index(208)] == FrameLabel.NOISY
    assert labels[list(starts).index(176)] == FrameLabel.DISCARD
    assert labels[list(starts).index(400)] == FrameLabel.NOISE_ONLY


def test_label_frames_discards_past_mask_end(toy_stft):
    mask = np.ones(300)
    labels = label_frames(mask, toy_stft, n_samples=400)
    starts = np.arange(labels.size) * toy_stft.hop
    assert labels.size == toy_stft.num_frames(400)
    assert np.all(labels[starts + 64 > 300] == FrameLabel.DISCARD)
    assert np.all(labels[starts + 64 <= 300] == FrameLabel.NOISY)


def test_covariances_are_hermitian_and_loaded(rng, toy_stft):
    grid = TFGrid(rng.standard_normal((20, 64, 3)) + 1j * rng.standard_normal((20, 64, 3)), toy_stft)
    labels = np.array([0] * 10 + [1] * 10)
    cov = estimate_covariances(grid, labels, loading=0.0)
    np.testing.assert_allclose(cov.phi_rr, np.swapaxes(cov.phi_rr, -1, -2).conj(), atol=1e-14)
    expected = np.einsum("lkm,lkn->kmn", grid.data[10:], grid.data[10:].conj()) / 10
    np.testing.assert_allclose(cov.phi_rr, expected, atol=1e-12)
    loaded = estimate_covariances(grid, labels, loading=0.1)
    trace = np.real(np.trace(cov.phi_vv, axis1=1, axis2=2))
    np.testing.assert_allclose(loaded.phi_vv - cov.phi_vv, (0.1 * trace / 3)[:, None, None] * np.eye(3), atol=1e-12)
    assert (cov.n_noisy, cov.n_noise) == (10, 10)


def test_covariances_need_both_classes(rng, toy_stft):
    grid = TFGrid(np.ones((5, 64, 2), dtype=complex), toy_stft)
    with pytest.raises(SignalError):
        estimate_covariances(grid, np.ones(5))
    with pytest.raises(ShapeError):
        estimate_covariances(grid, np.ones(4))


def test_gevd_recovers_rank_one_rtf(rng):
    bins, mics, ref = 16, 4, 2
    truth = random_rtf(rng, bins, mics, ref)
    phi_vv = random_pd_stack(rng, bins, mics)
    power = rng.uniform(1.0, 5.0, bins)
    phi_rr = power[:, None, None] * np.einsum("km,kn->kmn", truth.h, truth.h.conj()) + phi_vv
    h = rtf_from_pencil(phi_rr, phi_vv, ref)
    np.testing.assert_array_equal(h.h[:, ref], 1.0)
    np.testing.assert_allclose(h.h, truth.h, rtol=1e-8, atol=1e-8)
    assert npm(h, truth)[1] < -100.0


def test_gevd_homogeneity(rng):
    bins, mics = 8, 3
    phi_rr = random_pd_stack(rng, bins, mics)
    phi_vv = random_pd_stack(rng, bins, mics)
    h = rtf_from_pencil(phi_rr, phi_vv, 0).h
    np.testing.assert_allclose(rtf_from_pencil(7.0 * phi_rr, phi_vv, 0).h, h, atol=1e-10)
    np.testing.assert_allclose(rtf_from_pencil(3.0 * phi_rr, 3.0 * phi_vv, 0).h, h, atol=1e-10)


def test_covariances_need_as_many_frames_as_mics(rng, toy_stft):
    grid = TFGrid(rng.standard_normal((12, 64, 3)) + 1j * rng.standard_normal((12, 64, 3)), toy_stft)
    with pytest.raises(SignalError, match="got 2 and 10"):
        estimate_covariances(grid, np.array([0] * 10 + [1] * 2))
    with pytest.raises(SignalError, match="got 10 and 2"):
        estimate_covariances(grid, np.array([1] * 10 + [0] * 2))
    cov = estimate_covariances(grid, np.array([0] * 9 + [1] * 3))
    assert (cov.n_noisy, cov.n_noise) == (3, 9)


def test_estimate_rtf_gevd_uses_covariance_pair(rng, toy_stft):
    grid = TFGrid(rng.standard_normal((30, 64, 3)) + 1j * rng.standard_normal((30, 64, 3)), toy_stft)
    labels = np.array([0] * 15 + [1] * 15)
    cov = estimate_covariances(grid, labels)
    np.testing.assert_allclose(estimate_rtf_gevd(cov, 1).h, rtf_from_pencil(cov.phi_rr, cov.phi_vv, 1).h)


def test_clean_rtf_of_pure_delays(rng):
    cfg = StftConfig(fft_len=256, hop=64)
    x = rng.standard_normal(8000)
    delays = [0, 2, 3]
    data = np.stack([np.concatenate([np.zeros(d), x[:x.size - d]]) for d in delays])
    grid = stft(MultichannelSignal(data), cfg)
    labels = label_frames(np.ones(8000), cfg)
    h = estimate_rtf_clean(grid, labels, 0)
    feature = rtf_to_feature(h, 16, 32)
    truth = np.zeros((2, 48))
    truth[0, 16 + 2] = 1.0
    truth[1, 16 + 3] = 1.0
    assert npm(feature, truth)[1] < -25.0


def test_feature_conversions_are_consistent(rng):
    h = random_rtf(rng, bins=64, mics=3, ref=0)
    features = spectra_to_features(h.h, 0, 8, 16)
    assert features.shape == (2, 24)
    spectra = features_to_spectra(features, 0, 64, 8)
    np.testing.assert_array_equal(spectra[:, 0], 1.0)
    np.testing.assert_allclose(spectra_to_features(spectra, 0, 8, 16), features, atol=1e-12)

    feature = rtf_to_feature(h, 8, 16)
    np.testing.assert_allclose(feature.taps, features)
    np.testing.assert_allclose(feature_to_rtf(feature, 64).h, spectra)


def test_features_are_batched(rng):
    h = np.stack([random_rtf(rng, 32, 3, 2).h for _ in range(5)])
    batched = spectra_to_features(h, 2, 4, 8)
    assert batched.shape == (5, 2, 12)
    np.testing.assert_allclose(batched[3], spectra_to_features(h[3], 2, 4, 8))


def test_rtf_feature_validation():
    with pytest.raises(ShapeError):
        RTFFeature(np.zeros((2, 10)), 0, 4, 8)
    with pytest.raises(ShapeError):
        rtf_to_feature(RTFSpectrum(np.ones((8, 2)), 0), 4, 8)


def test_air_ratio_feature_with_impulse_reference():
    airs = np.zeros((2, 100))
    airs[0, 0] = 1.0
    airs[1, :5] = [0.5, 0.2, -0.1, 0.05, 0.01]
    feature = air_ratio_feature(airs, 0, 64, 8, 16)
    expected = np.zeros(24)
    expected[8:13] = airs[1, :5]
    np.testing.assert_allclose(feature.taps[0], expected, atol=1e-12)


def test_truncation_energy_capture():
    airs = np.zeros((2, 64))
    airs[0, 0] = 1.0
    airs[1, :4] = [1.0, 0.5, 0.25, 0.125]
    h = air_ratio_spectrum(airs, 0, 64)
    assert truncation_energy_capture(h, 8, 16) == pytest.approx(1.0, abs=1e-12)
    assert truncation_energy_capture(h, 0, 2) == pytest.approx(1.25 / (1.0 + 0.25 + 0.0625 + 0.015625), rel=1e-9)


def test_npm_values(rng):
    h = rng.standard_normal((2, 10))
    assert npm(h, h)[1] == -150.0
    assert npm(-3.0 * h, h)[1] == -150.0
    a = np.array([[1.0, 0.0]])
    b = np.array([[0.0, 1.0]])
    assert npm(a, b)[1] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(SignalError):
        npm(a, np.zeros((1, 2)))


ANECHOIC_MICS = [(1.4, 1.0, 1.2), (1.5, 1.0, 1.2), (1.6, 1.0, 1.2)]


def anechoic_airs(src, air_len=256):
    room = RoomSpec(dimensions=(3.0, 3.0, 2.5), t60=0.0)
    return np.stack([image_source_air(room, src, mic, air_len=air_len).taps for mic in ANECHOIC_MICS])


def silent_frame_labels(mask, air_len, cfg, n_samples):
    """Noisy frames per label_frames; noise-only only where the rendered image is silent."""
    labels = label_frames(mask, cfg, n_samples)
    active = np.convolve(mask, np.ones(air_len))[:n_samples] > 0
    starts = np.arange(labels.size) * cfg.hop
    silent = np.array([not active[s:s + cfg.fft_len].any() for s in starts])
    return np.where(labels == FrameLabel.NOISY, FrameLabel.NOISY,
                    np.where(silent, FrameLabel.NOISE_ONLY, FrameLabel.DISCARD))


def test_gevd_approaches_clean_estimate_at_high_snr():
    cfg = StftConfig(fft_len=1024, hop=256)
    airs = anechoic_airs((1.3, 1.8, 1.1))
    dry, mask = gen_speech_like(48000, 21)
    image = render_airs(airs, dry, 1)
    # sensor noise with the spectral shape of the image, independent per mic
    noise = np.stack([convolve(gen_pink_noise(48000, 100 + m), airs[1]).samples for m in range(3)])
    active = np.convolve(mask, np.ones(256))[:len(image)] > 0
    noise *= np.sqrt(np.mean(image.data[1, active] ** 2) / np.mean(noise[1] ** 2) / 10 ** (40.0 / 10))
    noisy = MultichannelSignal(image.data + noise, image.sample_rate, 1)

    labels = silent_frame_labels(mask, 256, cfg, len(image))
    assert np.sum(labels == FrameLabel.NOISE_ONLY) >= 3
    h_gevd = estimate_rtf_gevd(estimate_covariances(stft(noisy, cfg), labels), 1)
    h_clean = estimate_rtf_clean(stft(image, cfg), labels, 1)
    assert npm(rtf_to_feature(h_gevd, 64, 128), rtf_to_feature(h_clean, 64, 128))[1] < -30.0


def test_clean_estimate_matches_air_ratio_of_simulated_room():
    cfg = StftConfig(fft_len=1024, hop=256)
    airs = anechoic_airs((1.3, 1.8, 1.1))
    dry, mask = gen_speech_like(48000, 5)
    image = render_airs(airs, dry, 1)
    h_clean = estimate_rtf_clean(stft(image, cfg), label_frames(mask, cfg, len(image)), 1)
    truth = air_ratio_feature(airs, 1, 1024, 64, 128)
    assert npm(rtf_to_feature(h_clean, 64, 128), truth)[1] < -30.0
