"""
Waveform ingestion and time-frequency transforms.

Naming follows the usual audio conventions:
    clip  - AudioClip, mono float64 samples in [-1, 1] with a sample rate
    spec  - ComplexSpectrogram, T x (n_fft/2 + 1) complex STFT frames
    mel   - mel-band power, T x n_mels
    db    - 10 * log10(S / ref), floored at -80 dB

All arithmetic is float64; callers cast to float32 when storing tensors.
"""

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import soundfile as sf
from scipy.signal import get_window

from config import AMIN, CLIP_SAMPLES, N_FFT, N_FRAMES, N_MELS, SAMPLE_RATE, TOP_DB, DspConfig
from errors import ContractError, DomainError, ResolutionError, ShapeError, UnsupportedFormatError, WavFormatError


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""
    offset_s: float = 0.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeError(f"AudioClip expects mono samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise DomainError("AudioClip samples must be finite")
        object.__setattr__(self, "samples", samples)

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def is_standard(self, sample_rate: int = SAMPLE_RATE, n_samples: int = CLIP_SAMPLES) -> bool:
        return self.sample_rate == sample_rate and self.n_samples == n_samples


@dataclass(frozen=True)
class ComplexSpectrogram:
    frames: np.ndarray
    n_fft: int
    hop: int
    sample_rate: int

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(self.n_fft // 2 + 1) * self.sample_rate / self.n_fft

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    @property
    def power(self) -> np.ndarray:
        return np.abs(self.frames) ** 2


@dataclass(frozen=True)
class MelFilterBank:
    weights: np.ndarray
    mel_center_hz: np.ndarray
    fmin_hz: float
    fmax_hz: float


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray
    hop: int

    @property
    def shape(self):
        return self.values.shape


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def load_wav(path) -> AudioClip:
    """
    Decode a 16-bit PCM RIFF/WAVE file into a mono clip.

    Stereo is downmixed by averaging the two channels; integer samples are
    scaled by 1/32768.
    """
    path = Path(path)
    try:
        info = sf.info(str(path))
    except (RuntimeError, sf.SoundFileError) as e:
        raise WavFormatError(path, f"malformed WAV header ({e})") from e
    if info.format not in ("WAV", "WAVEX"):
        raise UnsupportedFormatError(path, "container", info.format)
    if info.subtype != "PCM_16":
        raise UnsupportedFormatError(path, "subtype", info.subtype)
    if info.channels not in (1, 2):
        raise UnsupportedFormatError(path, "channels", info.channels)
    try:
        data, sample_rate = sf.read(str(path), dtype="int16", always_2d=True)
    except (RuntimeError, sf.SoundFileError) as e:
        raise WavFormatError(path, f"cannot decode samples ({e})") from e
    samples = data.astype(np.float64) / 32768.0
    return AudioClip(samples.mean(axis=1), int(sample_rate), source_id=path.stem)


def write_wav(path, clip: AudioClip) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    sf.write(str(path), pcm, clip.sample_rate, subtype="PCM_16", format="WAV")
    return path


def resample(clip: AudioClip, target_sr: int) -> AudioClip:
    """Linear interpolation on the uniform time grid; aliasing is accepted."""
    if clip.n_samples == 0:
        raise ContractError("cannot resample an empty clip")
    if target_sr <= 0:
        raise ContractError(f"target_sr must be positive, got {target_sr}")
    if target_sr == clip.sample_rate:
        return clip
    n_out = (clip.n_samples * target_sr) // clip.sample_rate
    t_in = np.arange(clip.n_samples) / clip.sample_rate
    t_out = np.arange(n_out) / target_sr
    samples = np.interp(t_out, t_in, clip.samples)
    return AudioClip(samples, target_sr, clip.source_id, clip.offset_s)


def frame_signal(samples: np.ndarray, frame_length: int, hop: int) -> np.ndarray:
    """
    Centered framing: reflection-pad frame_length/2 on both sides, then cut
    1 + floor(n / hop) frames of frame_length samples.
    """
    if hop <= 0 or hop > frame_length:
        raise ContractError(f"need 0 < hop <= frame_length, got hop={hop}")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 1:
        raise ContractError("cannot frame an empty signal")
    pad = frame_length // 2
    padded = np.pad(samples, pad, mode="reflect") if samples.shape[0] > 1 else np.full(samples.shape[0] + 2 * pad, samples[0])
    n_frames = 1 + samples.shape[0] // hop
    windows = np.lib.stride_tricks.sliding_window_view(padded, frame_length)
    return windows[: n_frames * hop : hop][:n_frames]


@lru_cache(maxsize=8)
def hann_window(n_fft: int) -> np.ndarray:
    # periodic form (fftbins=True)
    window = get_window("hann", n_fft, fftbins=True).astype(np.float64)
    window.setflags(write=False)
    return window


def stft(clip: AudioClip, n_fft: int = N_FFT, hop: int = 512) -> ComplexSpectrogram:
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise ContractError(f"n_fft must be a power of two, got {n_fft}")
    frames = frame_signal(clip.samples, n_fft, hop)
    spectrum = np.fft.rfft(frames * hann_window(n_fft), n=n_fft, axis=1)
    return ComplexSpectrogram(spectrum, n_fft, hop, clip.sample_rate)


@lru_cache(maxsize=16)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: Optional[float] = None) -> MelFilterBank:
    """
    Triangular HTK-style filters over FFT bin centre frequencies, each row
    area-normalised by 2 / (f_upper - f_lower).
    """
    fmax = sr / 2 if fmax is None else fmax
    if n_mels < 1:
        raise DomainError(f"n_mels must be >= 1, got {n_mels}")
    if not 0 <= fmin < fmax <= sr / 2:
        raise DomainError(f"need 0 <= fmin < fmax <= sr/2, got fmin={fmin} fmax={fmax}")

    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sr / n_fft

    lower = hz_points[:-2, None]
    center = hz_points[1:-1, None]
    upper = hz_points[2:, None]
    rising = (bin_freqs[None, :] - lower) / (center - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= 2.0 / (upper - lower)

    empty = np.flatnonzero(~np.any(weights > 0, axis=1))
    if empty.size:
        raise ResolutionError(
            f"{empty.size} mel filter(s) have no FFT bin in their support "
            f"(n_mels={n_mels} too large for n_fft={n_fft}); first empty band {empty[0]}"
        )
    weights.setflags(write=False)
    centers = hz_points[1:-1].copy()
    centers.setflags(write=False)
    return MelFilterBank(weights, centers, float(fmin), float(fmax))


def power_to_db(S, amin: float = AMIN, top_db: float = TOP_DB) -> np.ndarray:
    """
    10 * log10(max(S, amin) / ref) with ref = max(S), floored at -top_db.
    An all-zero input sits on the floor everywhere.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.size and np.min(S) < 0:
        raise DomainError("power_to_db expects nonnegative power values")
    if S.size == 0:
        return S.copy()
    ref = float(np.max(S))
    if ref <= 0.0:
        return np.full(S.shape, -top_db)
    db = 10.0 * np.log10(np.maximum(S, amin)) - 10.0 * np.log10(max(ref, amin))
    return np.maximum(db, -top_db)


def standard_hop(n_samples: int = CLIP_SAMPLES, n_frames: int = N_FRAMES) -> int:
    """Hop that makes 1 + floor(n_samples / hop) equal n_frames (1035 for 30 s at 22,050 Hz)."""
    return n_samples // (n_frames - 1)


def mel_power(clip: AudioClip, n_fft: int = N_FFT, hop: int = 512, n_mels: int = N_MELS,
              fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    spec = stft(clip, n_fft, hop)
    bank = mel_filterbank(n_mels, n_fft, clip.sample_rate, fmin, fmax)
    return spec.power @ bank.weights.T


def require_standard(clip: AudioClip, cfg: Optional[DspConfig] = None) -> None:
    cfg = cfg or DspConfig()
    n_samples = int(round(cfg.sample_rate * cfg.clip_seconds))
    if not clip.is_standard(cfg.sample_rate, n_samples):
        raise ContractError(
            f"expected a {cfg.clip_seconds:g} s clip at {cfg.sample_rate} Hz ({n_samples} samples), "
            f"got {clip.n_samples} samples at {clip.sample_rate} Hz; resample and segment first"
        )


def mel_spectrogram(clip: AudioClip, cfg: Optional[DspConfig] = None) -> MelSpectrogram:
    cfg = cfg or DspConfig()
    require_standard(clip, cfg)
    hop = cfg.melspec_hop or standard_hop(clip.n_samples, cfg.n_frames)
    power = mel_power(clip, cfg.n_fft, hop, cfg.n_mels, cfg.fmin, cfg.fmax)
    values = power_to_db(power)
    if cfg.melspec_hop is None and values.shape != (cfg.n_frames, cfg.n_mels):
        raise ShapeError(f"mel spectrogram has shape {values.shape}, expected {(cfg.n_frames, cfg.n_mels)}")
    return MelSpectrogram(values, hop)
