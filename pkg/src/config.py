"""
Configuration constants and structured settings for the genre classifier.

The constants are shared across all modules to ensure consistency in audio
representation and model architecture; the pydantic models below layer them
into one resolvable run configuration (defaults < YAML file < CLI flags).
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError

PROJECT_DIR = Path(__file__).parent.parent
RUNS_DIR = PROJECT_DIR / "runs"

# Audio
SAMPLE_RATE = 22050
CLIP_SECONDS = 30
CLIP_SAMPLES = SAMPLE_RATE * CLIP_SECONDS
N_FFT = 2048
NOMINAL_HOP = 512
TEMPO_HOP = 256
N_MELS = 128
N_FRAMES = 640
TOP_DB = 80.0
AMIN = 1e-10

# Features
N_MFCC = 20
N_CHROMA = 12
N_CONTRAST_BANDS = 7
N_TONNETZ = 6
N_FEATURES = 51
CONTRAST_ALPHA = 0.02
CONTRAST_BASE_HZ = 200.0
ROLLOFF_FRAC = 0.85
TEMPO_MIN_BPM = 40.0
TEMPO_MAX_BPM = 200.0

# Genre order used for every label index in every artifact
GENRES = [
    "Aadhunik Sangeet",
    "Deuda",
    "Tamang Selo",
    "Lok Dohori",
    "Purbeli Bhaka",
    "Rap",
    "Rock",
    "Pop",
]

# Model hyperparameters
CONV_CHANNELS = [64, 128, 128]
KERNEL_WIDTH = 5
POOL_WIDTH = 2
LSTM_UNITS = 96
DENSE_UNITS = 64
DROPOUT_RATE = 0.3
L2_STRENGTH = 1e-4

# Training
BATCH_SIZE = 32
MAX_EPOCHS = 100
PATIENCE = 10
MIN_DELTA = 1e-4
VAL_FRACTION = 0.1
LEARNING_RATE = 1e-3

ArchitectureKind = Literal["cnn", "rnn", "parallel", "crnn"]
DEEP_ARCHS = ("cnn", "rnn", "parallel", "crnn")
CLASSICAL_ARCHS = ("logreg", "knn", "svm", "rf")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DspConfig(_Strict):
    sample_rate: int = SAMPLE_RATE
    clip_seconds: float = CLIP_SECONDS
    n_fft: int = N_FFT
    n_mels: int = N_MELS
    fmin: float = 0.0
    fmax: float = SAMPLE_RATE / 2
    n_frames: int = N_FRAMES
    # None derives the hop that yields exactly n_frames per clip
    melspec_hop: Optional[int] = None

    @field_validator("n_fft")
    @classmethod
    def power_of_two(cls, v):
        if v < 2 or v & (v - 1):
            raise ValueError("n_fft must be a power of two")
        return v

    @model_validator(mode="after")
    def band_edges(self):
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError("need 0 <= fmin < fmax <= sample_rate/2")
        return self


class FeatureConfig(_Strict):
    hop: int = NOMINAL_HOP
    n_mfcc: int = N_MFCC
    contrast_bands: int = N_CONTRAST_BANDS
    contrast_alpha: float = CONTRAST_ALPHA
    contrast_base_hz: float = CONTRAST_BASE_HZ
    rolloff_frac: float = ROLLOFF_FRAC
    tempo_hop: int = TEMPO_HOP
    tempo_min_bpm: float = TEMPO_MIN_BPM
    tempo_max_bpm: float = TEMPO_MAX_BPM

    @field_validator("rolloff_frac", "contrast_alpha")
    @classmethod
    def unit_interval(cls, v):
        if not 0 < v < 1:
            raise ValueError("must lie in (0, 1)")
        return v


class ArchitectureConfig(_Strict):
    kind: ArchitectureKind = "crnn"
    conv_channels: List[int] = Field(default_factory=lambda: list(CONV_CHANNELS))
    kernel_width: int = KERNEL_WIDTH
    pool_width: int = POOL_WIDTH
    lstm_hidden: int = LSTM_UNITS
    dense_hidden: int = DENSE_UNITS
    n_classes: int = len(GENRES)
    dropout: float = DROPOUT_RATE
    l2: float = L2_STRENGTH
    n_frames: int = N_FRAMES
    n_mels: int = N_MELS

    @field_validator("kernel_width")
    @classmethod
    def odd_kernel(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError("kernel_width must be odd")
        return v

    @field_validator("n_classes")
    @classmethod
    def at_least_two(cls, v):
        if v < 2:
            raise ValueError("n_classes must be >= 2")
        return v

    @field_validator("dropout")
    @classmethod
    def dropout_range(cls, v):
        if not 0 <= v < 1:
            raise ValueError("dropout must lie in [0, 1)")
        return v

    @model_validator(mode="after")
    def time_axis_survives_pooling(self):
        if self.kind != "rnn" and self.n_frames // self.pool_width ** len(self.conv_channels) < 1:
            raise ValueError("pooling removes the whole time axis")
        return self


class TrainConfig(_Strict):
    batch_size: int = BATCH_SIZE
    max_epochs: int = MAX_EPOCHS
    patience: int = PATIENCE
    min_delta: float = MIN_DELTA
    val_fraction: float = VAL_FRACTION
    seed: int = 0
    learning_rate: float = LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @field_validator("val_fraction")
    @classmethod
    def fraction(cls, v):
        if not 0 < v < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        return v

    @field_validator("patience", "batch_size", "max_epochs")
    @classmethod
    def positive(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v


class ClassicalConfig(_Strict):
    logreg_l2: float = 1e-3
    logreg_lr: float = 0.01
    logreg_max_iter: int = 5000
    logreg_tol: float = 1e-5
    knn_k: int = 5

    @field_validator("logreg_l2")
    @classmethod
    def nonnegative(cls, v):
        if v < 0:
            raise ValueError("logreg_l2 must be >= 0")
        return v


class RunConfig(_Strict):
    run_id: Optional[str] = None
    out_dir: str = str(RUNS_DIR)
    seed: int = 0
    n_jobs: int = 1
    class_order: List[str] = Field(default_factory=lambda: list(GENRES))
    dsp: DspConfig = Field(default_factory=DspConfig)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    classical: ClassicalConfig = Field(default_factory=ClassicalConfig)

    @model_validator(mode="before")
    @classmethod
    def derive_class_count(cls, data):
        if isinstance(data, dict) and "class_order" in data:
            arch = dict(data.get("architecture") or {})
            arch.setdefault("n_classes", len(data["class_order"]))
            data = {**data, "architecture": arch}
        return data

    @model_validator(mode="after")
    def classes_consistent(self):
        if len(set(self.class_order)) != len(self.class_order):
            raise ValueError("class_order contains duplicates")
        if self.architecture.n_classes != len(self.class_order):
            raise ValueError("architecture.n_classes must equal len(class_order)")
        return self


def deep_merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Resolve a run configuration.

    path: optional YAML document (same nesting as RunConfig)
    overrides: values coming from command-line flags, applied last
    """
    layered: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r") as f:
                document = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML in {path}: {e}") from e
        if not isinstance(document, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        layered = deep_merge(layered, document)
    if overrides:
        overrides = dict(overrides)
        # one --seed drives every seeded component unless the file pins train.seed
        if "seed" in overrides and "seed" not in (layered.get("train") or {}):
            overrides = deep_merge(overrides, {"train": {"seed": overrides["seed"]}})
        layered = deep_merge(layered, overrides)
    try:
        return RunConfig(**layered)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}") from e


def dump_run_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(cfg.model_dump(mode="json"), f, sort_keys=True)
    return path


def _digest(payload: Any) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def config_hash(cfg: RunConfig) -> str:
    dumped = cfg.model_dump(mode="json")
    # where outputs go does not change what is computed
    dumped.pop("out_dir", None)
    dumped.pop("run_id", None)
    dumped.pop("n_jobs", None)
    return _digest(dumped)


def data_hash(cfg: RunConfig) -> str:
    """Hash of everything that determines extracted tensors."""
    return _digest({
        "dsp": cfg.dsp.model_dump(mode="json"),
        "features": cfg.features.model_dump(mode="json"),
        "class_order": list(cfg.class_order),
    })
