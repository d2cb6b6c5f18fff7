import numpy as np
import pytest
import soundfile as sf

from conftest import sine, standard_clip
from config import CLIP_SAMPLES, N_FRAMES, N_MELS, SAMPLE_RATE, DspConfig
from dsp import (AudioClip, frame_signal, hann_window, hz_to_mel, load_wav, mel_filterbank, mel_spectrogram,
                 mel_to_hz, power_to_db, resample, standard_hop, stft)
from errors import ContractError, DomainError, ResolutionError, UnsupportedFormatError, WavFormatError


# --- decoding ------------------------------------------------------------------

def test_stereo_wav_is_averaged_to_mono(tmp_path):
    path = tmp_path / "stereo.wav"
    frames = np.tile(np.array([[16384, -16384]], dtype=np.int16), (100, 1))
    sf.write(str(path), frames, 8000, subtype="PCM_16")
    clip = load_wav(path)
    assert clip.sample_rate == 8000
    assert clip.n_samples == 100
    assert np.all(clip.samples == 0.0)


def test_pcm_scaling(tmp_path):
    path = tmp_path / "mono.wav"
    sf.write(str(path), np.array([16384, -32768, 0], dtype=np.int16), 22050, subtype="PCM_16")
    clip = load_wav(path)
    np.testing.assert_array_equal(clip.samples, [0.5, -1.0, 0.0])
    assert clip.source_id == "mono"


def test_float_wav_rejected_with_field(tmp_path):
    path = tmp_path / "float.wav"
    sf.write(str(path), np.zeros(10, dtype=np.float32), 22050, subtype="FLOAT")
    with pytest.raises(UnsupportedFormatError) as err:
        load_wav(path)
    assert err.value.field == "subtype"
    assert err.value.exit_code == 1


def test_garbage_file_is_malformed(tmp_path):
    path = tmp_path / "broken.wav"
    path.write_bytes(b"RIFF\x00\x00garbage")
    with pytest.raises(WavFormatError):
        load_wav(path)


def test_clip_rejects_non_finite():
    with pytest.raises(DomainError):
        AudioClip(np.array([0.0, np.nan]), 22050)


# --- resampling ------------------------------------------------------------------

def test_resample_identity_returns_same_clip():
    clip = AudioClip(sine(440.0, 0.1), SAMPLE_RATE)
    assert resample(clip, SAMPLE_RATE) is clip


def test_resample_length_and_rate():
    clip = AudioClip(sine(440.0, 1.0, sr=44100), 44100)
    out = resample(clip, 22050)
    assert out.sample_rate == 22050
    assert out.n_samples == 22050


def test_resample_keeps_low_frequency_tone():
    clip = AudioClip(sine(100.0, 1.0, sr=44100), 44100)
    out = resample(clip, 22050)
    np.testing.assert_allclose(out.samples, sine(100.0, 1.0, sr=22050), atol=1e-3)


def test_resample_rejects_bad_rate():
    with pytest.raises(ContractError):
        resample(AudioClip(np.zeros(10), 8000), 0)


# --- STFT -----------------------------------------------------------------------

def test_frame_count_is_one_plus_floor():
    frames = frame_signal(np.arange(1000, dtype=float), 256, 100)
    assert frames.shape == (11, 256)


def test_frame_count_on_random_lengths(rng):
    frame_length = 512
    for _ in range(50):
        n = int(rng.integers(300, 5000))
        hop = int(rng.integers(1, frame_length + 1))
        samples = rng.normal(size=n)
        frames = frame_signal(samples, frame_length, hop)
        padded = np.pad(samples, frame_length // 2, mode="reflect")
        expected = [padded[s:s + frame_length] for s in range(0, n + 1, hop)]
        assert frames.shape == (1 + n // hop, frame_length)
        np.testing.assert_array_equal(frames, np.array(expected))


@pytest.mark.parametrize("scale", [0.3, 2.5, 7.0])
def test_stft_magnitude_scales_linearly(rng, scale):
    samples = rng.normal(size=4096)
    base = stft(AudioClip(samples, SAMPLE_RATE), 1024, 256).magnitude
    scaled = stft(AudioClip(scale * samples, SAMPLE_RATE), 1024, 256).magnitude
    np.testing.assert_allclose(scaled, scale * base, rtol=1e-9, atol=1e-12 * base.max())


def test_stft_zero_signal():
    spec = stft(AudioClip(np.zeros(4096), SAMPLE_RATE), 1024, 256)
    assert np.all(np.abs(spec.frames) == 0)


def test_stft_constant_signal_dc_bin_equals_window_sum():
    spec = stft(AudioClip(np.ones(8192), SAMPLE_RATE), 1024, 256)
    window_sum = hann_window(1024).sum()
    interior = spec.frames[4:-4, 0]
    np.testing.assert_allclose(np.abs(interior), window_sum, rtol=1e-9)


def test_stft_matches_direct_dft(rng):
    n_fft, hop = 256, 64
    samples = rng.normal(size=256)
    spec = stft(AudioClip(samples, SAMPLE_RATE), n_fft, hop)
    frames = frame_signal(samples, n_fft, hop) * hann_window(n_fft)
    n = np.arange(n_fft)
    k = np.arange(n_fft // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(n, k) / n_fft)
    direct = frames @ basis
    np.testing.assert_allclose(spec.frames, direct, rtol=1e-6, atol=1e-9)


def test_stft_rejects_non_power_of_two():
    with pytest.raises(ContractError):
        stft(AudioClip(np.zeros(100), SAMPLE_RATE), 1000, 100)


# --- mel ----------------------------------------------------------------------

def test_mel_scale_round_trip_at_known_points():
    assert hz_to_mel(0.0) == pytest.approx(0.0)
    assert hz_to_mel(700.0) == pytest.approx(2595.0 * np.log10(2.0))
    assert mel_to_hz(hz_to_mel(1000.0)) == pytest.approx(1000.0)


@pytest.mark.parametrize("n_mels,n_fft,sr", [(128, 2048, 22050), (40, 512, 16000), (64, 1024, 44100)])
def test_filterbank_properties(n_mels, n_fft, sr):
    bank = mel_filterbank(n_mels, n_fft, sr)
    assert bank.weights.shape == (n_mels, n_fft // 2 + 1)
    assert np.all(bank.weights >= 0)
    assert np.all(np.diff(bank.mel_center_hz) > 0)
    assert np.all(bank.weights.max(axis=1) > 0)


@pytest.mark.parametrize("n_mels,n_fft,sr", [(128, 2048, 22050), (40, 512, 16000)])
def test_filterbank_rows_rise_then_fall(n_mels, n_fft, sr):
    for row in mel_filterbank(n_mels, n_fft, sr).weights:
        steps = np.diff(row)
        rising = np.flatnonzero(steps > 0)
        falling = np.flatnonzero(steps < 0)
        assert rising.size and falling.size
        assert rising.max() < falling.min()



def test_filterbank_too_many_bands_for_fft():
    with pytest.raises(ResolutionError):
        mel_filterbank(256, 256, 22050)


def test_power_to_db_reference_and_floor():
    db = power_to_db(np.array([1.0, 0.1, 1e-12, 0.0]))
    assert db[0] == 0.0
    assert db[1] == pytest.approx(-10.0)
    assert db[2] == -80.0
    assert db[3] == -80.0


def test_power_to_db_silence_sits_on_floor():
    np.testing.assert_array_equal(power_to_db(np.zeros((3, 4))), np.full((3, 4), -80.0))


def test_standard_hop_gives_640_frames():
    hop = standard_hop()
    assert hop == 1035
    assert 1 + CLIP_SAMPLES // hop == N_FRAMES


def test_mel_spectrogram_shape_and_range():
    spec = mel_spectrogram(standard_clip(sine(1000.0)))
    assert spec.shape == (N_FRAMES, N_MELS)
    assert spec.values.max() == pytest.approx(0.0)
    assert spec.values.min() >= -80.0
    assert spec.hop == 1035


def test_mel_spectrogram_of_silence_is_floor():
    spec = mel_spectrogram(standard_clip(np.zeros(CLIP_SAMPLES)))
    assert np.all(spec.values == -80.0)


def test_sine_energy_lands_in_its_mel_band():
    spec = mel_spectrogram(standard_clip(sine(1000.0)))
    bank = mel_filterbank()
    band = int(np.argmax(spec.values[N_FRAMES // 2]))
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(SAMPLE_RATE / 2), N_MELS + 2))
    assert edges[band] < 1000.0 < edges[band + 2]
    assert bank.mel_center_hz[band] == pytest.approx(1000.0, rel=0.05)


def test_mel_spectrogram_requires_standard_clip():
    with pytest.raises(ContractError, match="resample and segment first"):
        mel_spectrogram(AudioClip(np.zeros(1000), SAMPLE_RATE))


def test_mel_spectrogram_with_nominal_hop():
    cfg = DspConfig(melspec_hop=512)
    spec = mel_spectrogram(standard_clip(sine(440.0)), cfg)
    assert spec.shape == (1 + CLIP_SAMPLES // 512, N_MELS)
