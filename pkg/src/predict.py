"""
Classify a WAV file with a trained checkpoint.

Files longer than one clip are cut into consecutive 30 s windows (the short
tail is dropped) and the per-window probabilities are averaged.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from config import RUNS_DIR, RunConfig, data_hash
from dataio import segment
from dsp import load_wav, mel_spectrogram, resample
from errors import ArtifactMismatchError, ContractError
from features import extract_features_51
from log import get_logger
from models import TrainedModel, load_checkpoint, predict
from schemas import CheckpointManifest

logger = get_logger("PREDICT")


@dataclass
class Prediction:
    probabilities: np.ndarray
    genre: str
    n_windows: int
    class_order: List[str]

    def render(self) -> str:
        lines = [f"{genre:<16}  {p:.4f}" for genre, p in zip(self.class_order, self.probabilities)]
        lines.append("")
        lines.append(f"Predicted genre: {self.genre} ({self.n_windows} window(s) averaged)")
        return "\n".join(lines) + "\n"


def find_latest_checkpoint(runs_dir=None) -> Optional[Path]:
    """
    Most recently written *_checkpoint.mgt under runs_dir (RUNS_DIR by default),
    or None when there is none.
    """
    runs_dir = Path(runs_dir or RUNS_DIR)
    candidates = sorted(runs_dir.glob("**/*_checkpoint.mgt"), key=lambda p: (p.stat().st_mtime, str(p)))
    if not candidates:
        logger.warning(f"no checkpoint found in {runs_dir}")
        return None
    return candidates[-1]


def load_model(checkpoint, cfg: Optional[RunConfig] = None) -> Tuple[TrainedModel, CheckpointManifest]:
    """
    Load a checkpoint and, when cfg is given, make sure it was trained on
    tensors extracted with the same DSP / feature settings.
    """
    model, manifest = load_checkpoint(checkpoint)
    if cfg is not None and manifest.data_hash and manifest.data_hash != data_hash(cfg):
        raise ArtifactMismatchError(
            f"{checkpoint} was trained on data hash {manifest.data_hash[:12]}, the current configuration "
            f"extracts {data_hash(cfg)[:12]}; pass the run's config with --config")
    logger.info(f"model loaded: {checkpoint} ({manifest.architecture})")
    return model, manifest


def wav_windows(path, model: TrainedModel, cfg: Optional[RunConfig] = None) -> np.ndarray:
    """Model inputs for every full 30 s window of the file."""
    cfg = cfg or RunConfig()
    song = resample(load_wav(path), cfg.dsp.sample_rate)
    clips = segment(song, cfg.dsp.clip_seconds)
    if not clips:
        raise ContractError(f"{path} lasts {song.duration:.1f} s; at least {cfg.dsp.clip_seconds:g} s is needed")
    if model.is_deep:
        return np.stack([mel_spectrogram(clip, cfg.dsp).values for clip in clips]).astype(np.float32)
    return np.stack([extract_features_51(clip, cfg.features, cfg.dsp).values for clip in clips])


def classify_wav(model: TrainedModel, path, cfg: Optional[RunConfig] = None) -> Prediction:
    X = wav_windows(path, model, cfg)
    probs, _ = predict(model, X)
    mean = probs.mean(axis=0)
    # argmax keeps the lowest index on ties
    best = int(np.argmax(mean))
    logger.debug(f"{path}: {X.shape[0]} windows, per-window labels {np.argmax(probs, axis=1).tolist()}")
    return Prediction(mean, model.class_order[best], X.shape[0], list(model.class_order))
