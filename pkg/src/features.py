"""
Hand-crafted 51-dimensional clip descriptor.

Per-frame families are computed on the nominal feature hop and reduced by
their arithmetic mean over frames; tempo is a scalar. The layout of the
vector is fixed (see FEATURE_LAYOUT) and every artifact relies on it.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from scipy.fft import dct

from config import N_FEATURES, DspConfig, FeatureConfig
from dsp import (AudioClip, ComplexSpectrogram, frame_signal, mel_filterbank, mel_power, power_to_db,
                 require_standard, stft)
from errors import DomainError, ResolutionError, ShapeError

PITCH_CLASSES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]

FEATURE_LAYOUT: Dict[str, slice] = {
    "mfcc": slice(0, 20),
    "chroma": slice(20, 32),
    "contrast": slice(32, 39),
    "centroid": slice(39, 40),
    "bandwidth": slice(40, 41),
    "rolloff": slice(41, 42),
    "zcr": slice(42, 43),
    "tonnetz": slice(43, 49),
    "rms": slice(49, 50),
    "tempo": slice(50, 51),
}

FEATURE_NAMES: List[str] = (
    [f"mfcc_{i:02d}" for i in range(20)]
    + [f"chroma_{p}" for p in PITCH_CLASSES]
    + [f"contrast_{i}" for i in range(7)]
    + ["centroid_hz", "bandwidth_hz", "rolloff_hz", "zcr"]
    + [f"tonnetz_{i}" for i in range(6)]
    + ["rms", "tempo_bpm"]
)


@dataclass(frozen=True)
class FeatureVector51:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (N_FEATURES,):
            raise ShapeError(f"feature vector must have {N_FEATURES} entries, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DomainError("feature vector contains non-finite values")
        object.__setattr__(self, "values", values)

    def family(self, name: str) -> np.ndarray:
        return self.values[FEATURE_LAYOUT[name]]

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.values.tolist()))


@dataclass(frozen=True)
class TempoEstimate:
    bpm: float
    silent: bool


def log_mel_to_mfcc(log_mel: np.ndarray, n_mfcc: int = 20) -> np.ndarray:
    """Orthonormal DCT-II along the mel axis, first n_mfcc coefficients kept."""
    log_mel = np.atleast_2d(np.asarray(log_mel, dtype=np.float64))
    if n_mfcc > log_mel.shape[-1]:
        raise DomainError(f"n_mfcc={n_mfcc} exceeds the number of mel bands ({log_mel.shape[-1]})")
    return dct(log_mel, type=2, norm="ortho", axis=-1)[..., :n_mfcc]


def mfcc(clip: AudioClip, n_mfcc: int = 20, cfg: Optional[FeatureConfig] = None,
         dsp_cfg: Optional[DspConfig] = None) -> np.ndarray:
    cfg = cfg or FeatureConfig()
    dsp_cfg = dsp_cfg or DspConfig()
    require_standard(clip, dsp_cfg)
    if n_mfcc > dsp_cfg.n_mels:
        raise DomainError(f"n_mfcc={n_mfcc} exceeds n_mels={dsp_cfg.n_mels}")
    power = mel_power(clip, dsp_cfg.n_fft, cfg.hop, dsp_cfg.n_mels, dsp_cfg.fmin, dsp_cfg.fmax)
    return log_mel_to_mfcc(power_to_db(power), n_mfcc)


def pitch_class_of_bins(frequencies: np.ndarray) -> np.ndarray:
    """A440 equal temperament; bins at 0 Hz get class -1 and are ignored."""
    classes = np.full(frequencies.shape, -1, dtype=np.int64)
    positive = frequencies > 0
    midi = np.round(12.0 * np.log2(frequencies[positive] / 440.0)).astype(np.int64) + 69
    classes[positive] = np.mod(midi, 12)
    return classes


def chroma(spec: ComplexSpectrogram) -> np.ndarray:
    classes = pitch_class_of_bins(spec.frequencies)
    assignment = np.zeros((classes.shape[0], 12))
    valid = classes >= 0
    assignment[np.flatnonzero(valid), classes[valid]] = 1.0
    energy = spec.power @ assignment
    peaks = energy.max(axis=1, keepdims=True)
    return np.divide(energy, peaks, out=np.zeros_like(energy), where=peaks > 0)


def contrast_band_edges(sample_rate: int, n_bands: int = 7, base_hz: float = 200.0) -> np.ndarray:
    """Octave edges from base_hz, with a sub-base band and Nyquist on top."""
    octaves = base_hz * 2.0 ** np.arange(n_bands - 1)
    return np.concatenate([[0.0], octaves, [sample_rate / 2]])


def spectral_contrast(spec: ComplexSpectrogram, n_bands: int = 7, alpha: float = 0.02,
                      base_hz: float = 200.0) -> np.ndarray:
    freqs = spec.frequencies
    edges = contrast_band_edges(spec.sample_rate, n_bands, base_hz)
    magnitude = spec.magnitude
    out = np.zeros((magnitude.shape[0], n_bands))
    for band in range(n_bands):
        low, high = edges[band], edges[band + 1]
        if band == n_bands - 1:
            members = (freqs >= low) & (freqs <= high)
        else:
            members = (freqs >= low) & (freqs < high)
        if not np.any(members):
            raise ResolutionError(f"spectral contrast band {band} ({low:g}-{high:g} Hz) contains no FFT bins")
        sorted_band = np.sort(magnitude[:, members], axis=1)
        q = max(1, int(round(alpha * sorted_band.shape[1])))
        valley = sorted_band[:, :q].mean(axis=1)
        peak = sorted_band[:, -q:].mean(axis=1)
        out[:, band] = np.log(peak + 1e-10) - np.log(valley + 1e-10)
    return out


def spectral_shape(spec: ComplexSpectrogram, rolloff_frac: float = 0.85) -> np.ndarray:
    """Per-frame (centroid, bandwidth, rolloff) in Hz; silent frames give zeros."""
    m = spec.magnitude
    f = spec.frequencies
    total = m.sum(axis=1)
    voiced = total > 0
    safe_total = np.where(voiced, total, 1.0)

    centroid = np.where(voiced, (m @ f) / safe_total, 0.0)
    spread = (m * (f[None, :] - centroid[:, None]) ** 2).sum(axis=1) / safe_total
    bandwidth = np.where(voiced, np.sqrt(spread), 0.0)

    cumulative = np.cumsum(m, axis=1)
    reached = cumulative >= rolloff_frac * total[:, None]
    rolloff = np.where(voiced, f[np.argmax(reached, axis=1)], 0.0)
    return np.stack([centroid, bandwidth, rolloff], axis=1)


def zero_crossing_rate(clip: AudioClip, frame_length: int = 2048, hop: int = 512) -> np.ndarray:
    frames = frame_signal(clip.samples, frame_length, hop)
    nonnegative = frames >= 0
    crossings = np.count_nonzero(nonnegative[:, 1:] != nonnegative[:, :-1], axis=1)
    return crossings / (frame_length - 1)


def rms_energy(clip: AudioClip, frame_length: int = 2048, hop: int = 512) -> np.ndarray:
    frames = frame_signal(clip.samples, frame_length, hop)
    return np.sqrt(np.mean(frames ** 2, axis=1))


def tonnetz_basis() -> np.ndarray:
    """12 x 6 projection: fifths, minor thirds, major thirds as (sin, cos) pairs."""
    p = np.arange(12)
    angles = [7 * np.pi * p / 6, 3 * np.pi * p / 2, 2 * np.pi * p / 3]
    radii = [1.0, 1.0, 0.5]
    columns = []
    for angle, radius in zip(angles, radii):
        columns.append(radius * np.sin(angle))
        columns.append(radius * np.cos(angle))
    return np.stack(columns, axis=1)


def tonnetz(chroma_frames: np.ndarray) -> np.ndarray:
    chroma_frames = np.atleast_2d(np.asarray(chroma_frames, dtype=np.float64))
    if np.any(chroma_frames < 0):
        raise DomainError("tonnetz expects nonnegative chroma")
    totals = chroma_frames.sum(axis=1, keepdims=True)
    normalized = np.divide(chroma_frames, totals, out=np.zeros_like(chroma_frames), where=totals > 0)
    return normalized @ tonnetz_basis()


def onset_envelope(clip: AudioClip, cfg: Optional[FeatureConfig] = None,
                   dsp_cfg: Optional[DspConfig] = None) -> np.ndarray:
    cfg = cfg or FeatureConfig()
    dsp_cfg = dsp_cfg or DspConfig()
    power = mel_power(clip, dsp_cfg.n_fft, cfg.tempo_hop, dsp_cfg.n_mels, dsp_cfg.fmin, dsp_cfg.fmax)
    db = power_to_db(power)
    return np.maximum(0.0, np.diff(db, axis=0)).sum(axis=1)


def tempo(clip: AudioClip, cfg: Optional[FeatureConfig] = None,
          dsp_cfg: Optional[DspConfig] = None) -> TempoEstimate:
    """
    Autocorrelation of the mean-subtracted onset envelope; the strongest lag
    whose BPM lies in [tempo_min_bpm, tempo_max_bpm] wins.
    """
    cfg = cfg or FeatureConfig()
    dsp_cfg = dsp_cfg or DspConfig()
    require_standard(clip, dsp_cfg)
    envelope = onset_envelope(clip, cfg, dsp_cfg)
    if not np.any(envelope > 0):
        return TempoEstimate(0.0, True)

    envelope = envelope - envelope.mean()
    n = envelope.shape[0]
    acf = np.correlate(envelope, envelope, mode="full")[n - 1:]

    frames_per_minute = 60.0 * clip.sample_rate / cfg.tempo_hop
    lag_min = max(1, int(np.ceil(frames_per_minute / cfg.tempo_max_bpm)))
    lag_max = min(n - 1, int(np.floor(frames_per_minute / cfg.tempo_min_bpm)))
    if lag_max < lag_min:
        return TempoEstimate(0.0, False)
    lags = np.arange(lag_min, lag_max + 1)
    best = int(np.argmax(acf[lags]))
    if acf[lags][best] <= 0:
        return TempoEstimate(0.0, False)
    return TempoEstimate(float(frames_per_minute / lags[best]), False)


def extract_features_51(clip: AudioClip, cfg: Optional[FeatureConfig] = None,
                        dsp_cfg: Optional[DspConfig] = None) -> FeatureVector51:
    cfg = cfg or FeatureConfig()
    dsp_cfg = dsp_cfg or DspConfig()
    require_standard(clip, dsp_cfg)

    spec = stft(clip, dsp_cfg.n_fft, cfg.hop)
    bank = mel_filterbank(dsp_cfg.n_mels, dsp_cfg.n_fft, clip.sample_rate, dsp_cfg.fmin, dsp_cfg.fmax)
    log_mel = power_to_db(spec.power @ bank.weights.T)
    chroma_frames = chroma(spec)

    parts = [
        log_mel_to_mfcc(log_mel, cfg.n_mfcc).mean(axis=0),
        chroma_frames.mean(axis=0),
        spectral_contrast(spec, cfg.contrast_bands, cfg.contrast_alpha, cfg.contrast_base_hz).mean(axis=0),
        spectral_shape(spec, cfg.rolloff_frac).mean(axis=0),
        [zero_crossing_rate(clip, dsp_cfg.n_fft, cfg.hop).mean()],
        tonnetz(chroma_frames).mean(axis=0),
        [rms_energy(clip, dsp_cfg.n_fft, cfg.hop).mean()],
        [tempo(clip, cfg, dsp_cfg).bpm],
    ]
    return FeatureVector51(np.concatenate([np.atleast_1d(np.asarray(p, dtype=np.float64)) for p in parts]))

