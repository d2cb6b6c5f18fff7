"""
Dataset preparation and persistence.

- segment: cut a song into consecutive fixed-length clips
- split: song-level train/test assignment with per-genre quotas
- manifest CSV read/write
- MGT1 tensor container used for spectrogram sets and checkpoints

Container layout (all integers little-endian):
    b"MGT1" | u32 entry count | entries...
    entry = u32 name length | UTF-8 name | u8 dtype code (1 = float32)
            | u32 rank | rank x u64 dims | float32 payload, row-major
"""

import csv
import json
import math
import os
import struct
import tempfile
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from config import CLIP_SECONDS, GENRES
from dsp import AudioClip
from errors import (ArtifactMismatchError, ContractError, CorruptFileError, DataError, GranularityError, LabelError,
                    MissingArtifactError, QuotaError)
from log import get_logger
from schemas import ManifestEntry

logger = get_logger("DATAIO")

MAGIC = b"MGT1"
DTYPE_FLOAT32 = 1
MANIFEST_COLUMNS = ["clip_path", "source_id", "offset_s", "genre", "split"]
MANIFEST_KEY = "__manifest__"


# --- segmentation -------------------------------------------------------------

def segment(song: AudioClip, clip_seconds: float = CLIP_SECONDS) -> List[AudioClip]:
    """Non-overlapping windows from the start of the song; the short tail is dropped."""
    length = int(round(clip_seconds * song.sample_rate))
    if length <= 0:
        raise ContractError(f"clip_seconds must be positive, got {clip_seconds}")
    count = song.n_samples // length
    return [
        AudioClip(song.samples[k * length:(k + 1) * length], song.sample_rate, song.source_id,
                  song.offset_s + k * clip_seconds)
        for k in range(count)
    ]


# --- manifest -----------------------------------------------------------------

@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    class_order: List[str] = field(default_factory=lambda: list(GENRES))
    seed: Optional[int] = None

    def counts(self) -> Dict[Tuple[str, str], int]:
        return dict(Counter((e.genre, e.split) for e in self.entries))

    def select(self, split: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def labels(self, split: Optional[str] = None) -> np.ndarray:
        index = {genre: i for i, genre in enumerate(self.class_order)}
        rows = self.entries if split is None else self.select(split)
        return np.array([index[e.genre] for e in rows], dtype=np.int64)


def split(entries: Iterable[ManifestEntry], train_per_genre: int = 900, test_per_genre: int = 100,
          seed: int = 0, class_order: Sequence[str] = GENRES) -> DatasetManifest:
    """
    Assign whole source songs to one side, then draw clips to the quotas.

    For each genre the songs are permuted with default_rng([seed, genre index]);
    songs enter the test pool in that order until it holds test_per_genre
    clips and the rest form the train pool. Clips are then drawn from each
    pool by a seeded shuffle.
    """
    class_order = list(class_order)
    by_genre: Dict[str, List[ManifestEntry]] = defaultdict(list)
    for entry in entries:
        if entry.genre not in class_order:
            raise LabelError(f"genre '{entry.genre}' is not in the class order")
        by_genre[entry.genre].append(entry)

    selected: List[ManifestEntry] = []
    for g, genre in enumerate(class_order):
        clips = by_genre.get(genre, [])
        need = train_per_genre + test_per_genre
        if len(clips) < need:
            raise QuotaError(genre, f"{len(clips)} clips available, {need} required "
                                    f"({train_per_genre} train + {test_per_genre} test)")

        songs: Dict[str, List[ManifestEntry]] = defaultdict(list)
        for clip in clips:
            songs[clip.source_id].append(clip)
        song_ids = sorted(songs)
        if len(song_ids) < 2:
            raise GranularityError(genre, "all clips come from one song; it cannot sit on both sides of the split")

        rng = np.random.default_rng([seed, g])
        order = [song_ids[i] for i in rng.permutation(len(song_ids))]
        test_songs, held = [], 0
        for song_id in order:
            if held >= test_per_genre:
                break
            test_songs.append(song_id)
            held += len(songs[song_id])
        taken = set(test_songs)
        train_songs = [s for s in order if s not in taken]
        train_pool = [c for s in train_songs for c in songs[s]]
        if len(train_pool) < train_per_genre:
            raise GranularityError(
                genre, f"after moving whole songs into the test pool ({held} clips from {len(test_songs)} songs) "
                       f"only {len(train_pool)} train clips remain, {train_per_genre} required")
        test_pool = [c for s in test_songs for c in songs[s]]

        for pool, quota, tag in ((train_pool, train_per_genre, "train"), (test_pool, test_per_genre, "test")):
            pool = sorted(pool, key=lambda c: (c.source_id, c.offset_s, c.clip_path))
            picked = [pool[i] for i in rng.permutation(len(pool))[:quota]]
            picked.sort(key=lambda c: (c.source_id, c.offset_s, c.clip_path))
            selected.extend(e.model_copy(update={"split": tag}) for e in picked)

    logger.info(f"split: {sum(e.split == 'train' for e in selected)} train / "
                f"{sum(e.split == 'test' for e in selected)} test clips (seed {seed})")
    return DatasetManifest(selected, class_order, seed)


def write_manifest(path, manifest: DatasetManifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow([e.clip_path, e.source_id, repr(float(e.offset_s)), e.genre, e.split])
    return path


def read_manifest(path, class_order: Sequence[str] = GENRES) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"manifest not found: {path}")
    entries = []
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_COLUMNS:
            raise DataError(f"{path}: expected header {','.join(MANIFEST_COLUMNS)}, got {reader.fieldnames}")
        for line, row in enumerate(reader, start=2):
            try:
                entries.append(ManifestEntry(**row))
            except ValidationError as e:
                raise DataError(f"{path}:{line}: invalid manifest row: {e}") from e
    unknown = sorted({e.genre for e in entries} - set(class_order))
    if unknown:
        raise LabelError(f"{path}: genres not in the class order: {unknown}")
    return DatasetManifest(entries, list(class_order))


# --- tensor container -----------------------------------------------------------

def write_container(path, tensors: Mapping[str, np.ndarray]) -> Path:
    """
    Write named tensors as float32. The file appears atomically: data goes
    to a temporary sibling that replaces the target once complete.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for name, value in tensors.items():
        if any(d == 0 for d in np.shape(value)):
            raise ContractError(f"tensor '{name}' has a zero dimension {np.shape(value)}")

    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(tensors)))
            for name, value in tensors.items():
                encoded = name.encode("utf-8")
                array = np.array(value, dtype="<f4", order="C")
                f.write(struct.pack("<I", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<BI", DTYPE_FLOAT32, array.ndim))
                f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
                f.write(array.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def encode_json(payload: Mapping) -> np.ndarray:
    """JSON metadata stored as a tensor of byte codes (float32 holds 0..255 exactly)."""
    raw = json.dumps(payload, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def decode_json(codes: np.ndarray, path="container") -> dict:
    codes = np.asarray(codes).reshape(-1)
    if np.any((codes < 0) | (codes > 255) | (codes != np.round(codes))):
        raise ArtifactMismatchError(f"{path}: '{MANIFEST_KEY}' entry is not a byte string")
    try:
        return json.loads(codes.astype(np.uint8).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactMismatchError(f"{path}: '{MANIFEST_KEY}' entry is not valid JSON ({e})") from e


def read_metadata(tensors: Mapping[str, np.ndarray], path="container") -> dict:
    if MANIFEST_KEY not in tensors:
        raise ArtifactMismatchError(f"{path}: no '{MANIFEST_KEY}' entry")
    return decode_json(tensors[MANIFEST_KEY], path)


class _Reader:
    def __init__(self, path: Path, f, size: int):
        self.path = path
        self.f = f
        self.size = size

    def take(self, n: int, what: str) -> bytes:
        offset = self.f.tell()
        data = self.f.read(n)
        if len(data) != n:
            raise CorruptFileError(self.path, offset, f"truncated {what} (need {n} bytes, {len(data)} left)")
        return data

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(path) -> Dict[str, np.ndarray]:
    """Validate every header and payload length, then materialise the tensors."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"container not found: {path}")
    with open(path, "rb") as f:
        reader = _Reader(path, f, os.fstat(f.fileno()).st_size)
        magic = reader.take(4, "magic")
        if magic != MAGIC:
            raise CorruptFileError(path, 0, f"bad magic {magic!r}")
        (count,) = reader.unpack("<I", "entry count")

        layout = []
        for _ in range(count):
            (name_len,) = reader.unpack("<I", "name length")
            name_at = f.tell()
            try:
                name = reader.take(name_len, "name").decode("utf-8")
            except UnicodeDecodeError as e:
                raise CorruptFileError(path, name_at, f"name is not UTF-8 ({e})") from e
            dtype_at = f.tell()
            (dtype_code,) = reader.unpack("<B", "dtype code")
            if dtype_code != DTYPE_FLOAT32:
                raise CorruptFileError(path, dtype_at, f"unknown dtype code {dtype_code}")
            (rank,) = reader.unpack("<I", "rank")
            dims = reader.unpack(f"<{rank}Q", "dims") if rank else ()
            if name in {entry[0] for entry in layout}:
                raise CorruptFileError(path, name_at, f"duplicate tensor name '{name}'")
            # python ints: corrupt dims must not wrap around
            nbytes = 4 * math.prod(int(d) for d in dims)
            payload_at = f.tell()
            if payload_at + nbytes > reader.size:
                raise CorruptFileError(path, payload_at, f"payload of '{name}' truncated "
                                                         f"(need {nbytes} bytes, {reader.size - payload_at} left)")
            layout.append((name, tuple(int(d) for d in dims), payload_at, nbytes))
            f.seek(payload_at + nbytes)
        if f.tell() != reader.size:
            raise CorruptFileError(path, f.tell(), f"{reader.size - f.tell()} trailing bytes after last entry")

        tensors = {}
        for name, dims, payload_at, nbytes in layout:
            f.seek(payload_at)
            data = reader.take(nbytes, f"payload of '{name}'")
            tensors[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
    return tensors
