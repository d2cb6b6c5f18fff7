import os
import sys

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from config import CLIP_SAMPLES, SAMPLE_RATE, ArchitectureConfig  # noqa: E402
from dataio import MANIFEST_KEY, encode_json, write_container  # noqa: E402
from dsp import AudioClip, write_wav  # noqa: E402
from schemas import DataManifest  # noqa: E402


def sine(freq: float, seconds: float = 30.0, sr: int = SAMPLE_RATE, amplitude: float = 0.5) -> np.ndarray:
    t = np.arange(int(round(seconds * sr))) / sr
    return amplitude * np.sin(2 * np.pi * freq * t)


def click_train(bpm: float, seconds: float = 30.0, sr: int = SAMPLE_RATE, burst_s: float = 0.01) -> np.ndarray:
    samples = np.zeros(int(round(seconds * sr)))
    period = 60.0 / bpm
    burst = int(round(burst_s * sr))
    for start in np.arange(0.0, seconds, period):
        i = int(round(start * sr))
        samples[i:i + burst] = 0.8
    return samples


def standard_clip(samples: np.ndarray, source_id: str = "song") -> AudioClip:
    assert samples.shape[0] == CLIP_SAMPLES
    return AudioClip(samples, SAMPLE_RATE, source_id)


def write_song(path, seconds: float, freq: float = 440.0, sr: int = SAMPLE_RATE):
    return write_wav(path, AudioClip(sine(freq, seconds, sr), sr))


def tiny_arch(kind: str = "crnn", n_frames: int = 16, n_mels: int = 8, n_classes: int = 3,
              dropout: float = 0.0) -> ArchitectureConfig:
    return ArchitectureConfig(kind=kind, conv_channels=[4, 4, 4], kernel_width=3, pool_width=2,
                              lstm_hidden=5, dense_hidden=6, n_classes=n_classes, dropout=dropout,
                              n_frames=n_frames, n_mels=n_mels)


def blobs(n_per_class: int, n_classes: int, dim: int, seed: int = 0, spread: float = 0.3):
    """Well separated Gaussian clusters, one per class."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 4.0, size=(n_classes, dim))
    X = np.concatenate([c + spread * rng.normal(size=(n_per_class, dim)) for c in centers])
    y = np.repeat(np.arange(n_classes), n_per_class)
    return X, y


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def separable_spectrograms(n_per_class: int, n_classes: int = 3, n_frames: int = 16, n_mels: int = 8,
                           seed: int = 0):
    """dB-like spectrograms where class k is loud in mel bands 2k and 2k+1."""
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(n_classes), n_per_class)
    X = -60.0 + 3.0 * rng.normal(size=(y.size, n_frames, n_mels))
    for i, k in enumerate(y):
        X[i, :, 2 * k:2 * k + 2] += 50.0
    return X.astype(np.float32), y


def write_split(path, X, y, mode: str = "melspec", class_order=("a", "b", "c"), split: str = "train",
                data_hash: str = "test-data"):
    """An extracted train/test container as the extract command writes it."""
    meta = DataManifest(mode=mode, split=split, data_hash=data_hash, class_order=list(class_order),
                        n_clips=len(y))
    return write_container(path, {"X": X, "y": np.asarray(y, dtype=np.float32),
                                  MANIFEST_KEY: encode_json(meta.model_dump(mode="json"))})
