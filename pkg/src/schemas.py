from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator


class TrainingEpoch(BaseModel):
    """One row of the per-epoch curves CSV."""
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


class TrainingStats(BaseModel):
    """Payload handed to the stats callback after every epoch."""
    epoch: int
    total_epochs: int
    loss: float
    accuracy: float
    val_loss: float
    val_accuracy: float
    learning_rate: float
    batch_size: int
    time_elapsed: float
    eta: float
    best_epoch: int
    stopping: bool = False


class ManifestEntry(BaseModel):
    clip_path: str
    source_id: str
    offset_s: float
    genre: str
    split: Literal["train", "test"] = "train"

    @field_validator("split", mode="before")
    @classmethod
    def lower_split(cls, v):
        if isinstance(v, str):
            return v.strip().lower()
        return v

    @field_validator("offset_s")
    @classmethod
    def nonnegative_offset(cls, v):
        if v < 0:
            raise ValueError("offset_s must be >= 0")
        return v


class CheckpointManifest(BaseModel):
    architecture: str
    class_order: List[str]
    config_hash: str = ""
    data_hash: str = ""
    epoch: int = 0
    metrics: Dict[str, float] = Field(default_factory=dict)
    architecture_config: Optional[Dict] = None
    classical: Optional[Dict] = None
    feature_mode: Literal["melspec", "features51"] = "melspec"


class DataManifest(BaseModel):
    """Metadata stored with every extracted train/test container."""
    mode: Literal["melspec", "features51"]
    split: Literal["train", "test"]
    data_hash: str
    class_order: List[str]
    n_clips: int
