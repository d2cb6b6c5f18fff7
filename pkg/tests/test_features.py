import numpy as np
import pytest

from conftest import click_train, sine, standard_clip
from config import CLIP_SAMPLES, N_FEATURES, SAMPLE_RATE
from dsp import AudioClip, ComplexSpectrogram, frame_signal, mel_filterbank, power_to_db, stft
from errors import ContractError, DomainError, ShapeError
from features import (FEATURE_LAYOUT, FEATURE_NAMES, FeatureVector51, chroma, extract_features_51,
                      log_mel_to_mfcc, mfcc, pitch_class_of_bins, rms_energy, spectral_contrast, spectral_shape,
                      tempo, tonnetz, tonnetz_basis, zero_crossing_rate)


def flat_spectrum(n_frames: int = 3, n_fft: int = 2048, sr: int = SAMPLE_RATE) -> ComplexSpectrogram:
    return ComplexSpectrogram(np.ones((n_frames, n_fft // 2 + 1), dtype=complex), n_fft, 512, sr)


def test_layout_covers_51_named_slots():
    assert len(FEATURE_NAMES) == N_FEATURES
    covered = sorted(i for s in FEATURE_LAYOUT.values() for i in range(s.start, s.stop))
    assert covered == list(range(N_FEATURES))


def test_mfcc_matches_direct_dct_summation(rng):
    log_mel = rng.normal(size=(4, 128))
    got = log_mel_to_mfcc(log_mel, 20)
    M = log_mel.shape[1]
    m = np.arange(M)
    direct = np.empty((4, 20))
    for k in range(20):
        scale = np.sqrt(1.0 / M) if k == 0 else np.sqrt(2.0 / M)
        direct[:, k] = scale * (log_mel * np.cos(np.pi * k * (2 * m + 1) / (2 * M))).sum(axis=1)
    np.testing.assert_allclose(got, direct, rtol=1e-9, atol=1e-9)


def test_mfcc_of_constant_spectrum_has_only_c0():
    coeffs = log_mel_to_mfcc(np.full((1, 128), -80.0))
    assert coeffs[0, 0] == pytest.approx(-80.0 * np.sqrt(128))
    np.testing.assert_allclose(coeffs[0, 1:], 0.0, atol=1e-9)


def test_mfcc_rejects_too_many_coefficients():
    with pytest.raises(DomainError):
        log_mel_to_mfcc(np.zeros((1, 10)), 20)


def test_mfcc_shape_on_standard_clip():
    out = mfcc(standard_clip(sine(440.0)))
    assert out.shape == (1 + CLIP_SAMPLES // 512, 20)


def test_pitch_classes_of_reference_tones():
    classes = pitch_class_of_bins(np.array([0.0, 440.0, 261.63, 880.0]))
    assert classes.tolist() == [-1, 9, 0, 9]


def test_chroma_of_a440_peaks_at_a():
    clip = AudioClip(sine(440.0, 1.0), SAMPLE_RATE)
    frames = chroma(stft(clip, 2048, 512))
    mid = frames[frames.shape[0] // 2]
    assert int(np.argmax(mid)) == 9
    assert mid.max() == pytest.approx(1.0)


def test_chroma_of_silence_is_zero():
    frames = chroma(stft(AudioClip(np.zeros(4096), SAMPLE_RATE), 2048, 512))
    assert np.all(frames == 0)


def test_contrast_of_flat_spectrum_is_zero():
    out = spectral_contrast(flat_spectrum())
    assert out.shape == (3, 7)
    np.testing.assert_allclose(out, 0.0, atol=1e-9)


def test_shape_of_flat_spectrum():
    spec = flat_spectrum()
    out = spectral_shape(spec)
    freqs = spec.frequencies
    np.testing.assert_allclose(out[:, 0], freqs.mean())
    np.testing.assert_allclose(out[:, 1], freqs.std())
    np.testing.assert_allclose(out[:, 2], freqs[871])


def test_shape_of_silent_frames_is_zero():
    spec = ComplexSpectrogram(np.zeros((2, 1025), dtype=complex), 2048, 512, SAMPLE_RATE)
    np.testing.assert_array_equal(spectral_shape(spec), 0.0)


def test_zcr_of_100hz_sine_matches_pair_count():
    samples = sine(100.0, 30.0)
    clip = standard_clip(samples)
    got = zero_crossing_rate(clip).mean()
    frames = frame_signal(samples, 2048, 512)
    expected = np.mean([np.sum((f[1:] >= 0) != (f[:-1] >= 0)) / 2047 for f in frames])
    assert got == pytest.approx(expected)
    assert got == pytest.approx(200.0 / SAMPLE_RATE, rel=0.05)


def test_zcr_zero_counts_as_nonnegative():
    clip = AudioClip(np.array([0.0, 0.0, 1.0, -1.0] * 512), SAMPLE_RATE)
    frames = frame_signal(clip.samples, 2048, 512)
    expected = np.array([np.sum((f[1:] >= 0) != (f[:-1] >= 0)) / 2047 for f in frames])
    np.testing.assert_allclose(zero_crossing_rate(clip), expected)


def test_rms_of_constant_and_sine():
    const = AudioClip(np.full(8192, 0.25), SAMPLE_RATE)
    np.testing.assert_allclose(rms_energy(const), 0.25)
    tone = standard_clip(sine(441.0, amplitude=1.0))
    assert rms_energy(tone)[10:-10].mean() == pytest.approx(1 / np.sqrt(2), rel=5e-3)


def test_tonnetz_basis_radii():
    basis = tonnetz_basis()
    assert basis.shape == (12, 6)
    np.testing.assert_allclose(basis[:, 0] ** 2 + basis[:, 1] ** 2, 1.0)
    np.testing.assert_allclose(basis[:, 4] ** 2 + basis[:, 5] ** 2, 0.25)


def test_tonnetz_of_uniform_chroma_is_origin():
    out = tonnetz(np.ones((2, 12)))
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_tonnetz_rejects_negative_chroma():
    with pytest.raises(DomainError):
        tonnetz(-np.ones((1, 12)))


@pytest.mark.parametrize("bpm", [60.0, 120.0])
def test_tempo_of_click_train(bpm):
    estimate = tempo(standard_clip(click_train(bpm)))
    assert not estimate.silent
    assert estimate.bpm == pytest.approx(bpm, abs=2.0)


def test_tempo_of_silence_is_zero():
    estimate = tempo(standard_clip(np.zeros(CLIP_SAMPLES)))
    assert estimate.silent
    assert estimate.bpm == 0.0


def test_features_of_silence():
    vec = extract_features_51(standard_clip(np.zeros(CLIP_SAMPLES)))
    floor_mfcc = log_mel_to_mfcc(power_to_db(np.zeros((1, 128))))[0]
    np.testing.assert_allclose(vec.family("mfcc"), floor_mfcc, atol=1e-9)
    assert vec.family("mfcc")[0] != 0
    for family in ("chroma", "contrast", "centroid", "bandwidth", "rolloff", "zcr", "tonnetz", "rms", "tempo"):
        np.testing.assert_allclose(vec.family(family), 0.0, atol=1e-9, err_msg=family)


def test_features_are_deterministic():
    samples = sine(330.0) + 0.1 * sine(2000.0)
    a = extract_features_51(standard_clip(samples.copy()))
    b = extract_features_51(standard_clip(samples.copy()))
    assert a.values.shape == (51,)
    np.testing.assert_array_equal(a.values, b.values)
    assert list(a.as_dict()) == FEATURE_NAMES


def test_features_ignore_amplitude_scale():
    samples = 0.5 * sine(330.0) + 0.4 * click_train(120.0)
    base = extract_features_51(standard_clip(samples))
    quiet = extract_features_51(standard_clip(0.5 * samples))
    for family in ("chroma", "tonnetz", "zcr", "rolloff", "centroid", "bandwidth", "tempo"):
        np.testing.assert_allclose(quiet.family(family), base.family(family), rtol=1e-6, atol=1e-12,
                                   err_msg=family)
    np.testing.assert_allclose(quiet.family("rms"), 0.5 * base.family("rms"), rtol=1e-12)


def test_features_require_standard_clip():
    with pytest.raises(ContractError):
        extract_features_51(AudioClip(np.zeros(1000), SAMPLE_RATE))


def test_feature_vector_validates_length():
    with pytest.raises(ShapeError):
        FeatureVector51(np.zeros(50))


def test_default_bank_is_cached():
    assert mel_filterbank() is mel_filterbank()
