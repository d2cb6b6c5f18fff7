"""
Dataset preparation: raw songs -> 30 s clips + manifest -> tensor containers.

Expected input layout:
    <in_dir>/<genre>/<song>.wav

prepare_dataset writes <out_dir>/clips/<genre>/<song>_<k>.wav and
<out_dir>/manifest.csv; extract_dataset turns a manifest into
<mode>_train.mgt / <mode>_test.mgt (plus CSV rows for features51).
"""

import csv
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import ValidationError
from tqdm import tqdm

from config import RunConfig, data_hash, dump_run_config
from dataio import (MANIFEST_KEY, DatasetManifest, encode_json, read_container, read_manifest, read_metadata,
                    segment, split, write_container, write_manifest)
from dsp import AudioClip, load_wav, mel_spectrogram, resample, write_wav
from errors import (ArtifactMismatchError, ConfigError, GenreError, LabelError, UnreadableClipsError,
                    WavFormatError)
from evaluate import plot_melspectrogram
from features import FEATURE_NAMES, extract_features_51
from log import get_logger
from schemas import DataManifest, ManifestEntry

logger = get_logger("PREPROCESS")
extract_logger = get_logger("EXTRACT")

MODES = ("melspec", "features51")
COUNT_RULE = "-" * 34


def collect_audio_files(in_dir, class_order: Optional[Sequence[str]] = None) -> Dict[str, List[Path]]:
    """
    in_dir: folder with one sub-folder of .wav songs per genre
    class_order: when given, every genre folder must be one of these labels
    """
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise ConfigError(f"input folder not found: {in_dir}")
    songs = {}
    for genre_dir in sorted(p for p in in_dir.iterdir() if p.is_dir()):
        wavs = sorted(p for p in genre_dir.iterdir() if p.is_file() and p.suffix.lower() == ".wav")
        if wavs:
            songs[genre_dir.name] = wavs
    if not songs:
        raise ConfigError(f"no genres found in {in_dir} (expected <genre>/<song>.wav)")
    if class_order is not None:
        unknown = sorted(set(songs) - set(class_order))
        if unknown:
            raise LabelError(f"genre folders not in the class order: {unknown}")
    logger.info(f"{sum(len(v) for v in songs.values())} songs found in {len(songs)} genres")
    return songs


def format_counts(manifest: DatasetManifest) -> str:
    counts = manifest.counts()
    lines = [f"{'Genre':<18}{'Train':>8}{'Test':>8}", COUNT_RULE]
    total_train = total_test = 0
    for genre in manifest.class_order:
        n_train = counts.get((genre, "train"), 0)
        n_test = counts.get((genre, "test"), 0)
        total_train += n_train
        total_test += n_test
        lines.append(f"{genre:<18}{n_train:>8d}{n_test:>8d}")
    lines.append(COUNT_RULE)
    lines.append(f"{'Total':<18}{total_train:>8d}{total_test:>8d}")
    return "\n".join(lines)


def prepare_dataset(in_dir, out_dir, cfg: Optional[RunConfig] = None,
                    train_per_genre: int = 900, test_per_genre: int = 100,
                    progress_callback: Optional[Callable[[int, str], None]] = None) -> Tuple[DatasetManifest, Path]:
    """
    in_dir: <genre>/<song>.wav tree
    out_dir: destination for clips/ and manifest.csv
    cfg: sample rate, clip length, seed and class order
    train_per_genre / test_per_genre: clip quotas per genre
    progress_callback: called with (progress: int, message: str)
    """
    cfg = cfg or RunConfig()

    def update_progress(progress, message):
        if progress_callback:
            progress_callback(progress, message)

    out_dir = Path(out_dir)
    update_progress(5, "Collecting songs...")
    songs = collect_audio_files(in_dir, cfg.class_order)

    entries: List[ManifestEntry] = []
    for genre, paths in songs.items():
        for path in tqdm(paths, desc=genre, unit="song"):
            song = resample(load_wav(path), cfg.dsp.sample_rate)
            source_id = f"{genre}/{path.stem}"
            song = AudioClip(song.samples, song.sample_rate, source_id, 0.0)
            clips = segment(song, cfg.dsp.clip_seconds)
            if not clips:
                logger.warning(f"{path} is shorter than {cfg.dsp.clip_seconds:g} s, skipped")
            for k, clip in enumerate(clips):
                clip_path = Path("clips") / genre / f"{path.stem}_{k:03d}.wav"
                write_wav(out_dir / clip_path, clip)
                entries.append(ManifestEntry(clip_path=clip_path.as_posix(), source_id=source_id,
                                             offset_s=clip.offset_s, genre=genre))
    update_progress(70, f"Splitting {len(entries)} clips...")

    manifest = split(entries, train_per_genre, test_per_genre, cfg.seed, cfg.class_order)
    kept = {e.clip_path for e in manifest.entries}
    dropped = [e for e in entries if e.clip_path not in kept]
    for e in dropped:
        (out_dir / e.clip_path).unlink(missing_ok=True)
    if dropped:
        logger.info(f"removed {len(dropped)} clips outside the quotas")

    manifest_path = write_manifest(out_dir / "manifest.csv", manifest)
    dump_run_config(cfg, out_dir / "prep_config.yaml")
    print(format_counts(manifest))
    print(f"\nmanifest saved in {manifest_path}")
    update_progress(100, "Preparation completed successfully!")
    return manifest, manifest_path


# --- extraction ------------------------------------------------------------------

def _extract_one(path: Path, mode: str, cfg: RunConfig) -> Tuple[Optional[np.ndarray], Optional[str]]:
    """Worker: one clip -> (tensor, None) or (None, reason)."""
    try:
        clip = load_wav(path)
        if mode == "melspec":
            return mel_spectrogram(clip, cfg.dsp).values.astype(np.float32), None
        return extract_features_51(clip, cfg.features, cfg.dsp).values, None
    except (WavFormatError, OSError) as e:
        return None, str(e)
    except GenreError as e:
        return None, f"{type(e).__name__}: {e}"


def _clip_path(manifest_path: Path, entry: ManifestEntry) -> Path:
    path = Path(entry.clip_path)
    return path if path.is_absolute() else manifest_path.parent / path


def _write_feature_csv(path: Path, entries: Sequence[ManifestEntry], X: np.ndarray) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["source_id", "offset_s", *FEATURE_NAMES, "genre"])
        for entry, row in zip(entries, X):
            writer.writerow([entry.source_id, repr(float(entry.offset_s)), *(format(v, ".17g") for v in row),
                             entry.genre])
    return path


def extract_dataset(manifest_path, out_dir, cfg: Optional[RunConfig] = None, mode: str = "melspec",
                    examples: bool = False) -> Dict[str, Path]:
    """
    manifest_path: manifest.csv written by prepare_dataset
    out_dir: destination for <mode>_<split>.mgt (and .csv for features51)
    cfg: DSP / feature settings, class order, n_jobs
    mode: melspec (N x 640 x 128) or features51 (N x 51)
    examples: also plot the first training spectrogram of every genre
    """
    cfg = cfg or RunConfig()
    if mode not in MODES:
        raise ConfigError(f"unknown extraction mode '{mode}' (expected one of {MODES})")
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path, cfg.class_order)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = data_hash(cfg)
    written: Dict[str, Path] = {}

    results = {}
    failures = []
    for split_name in ("train", "test"):
        entries = manifest.select(split_name)
        if not entries:
            extract_logger.warning(f"no {split_name} clips in {manifest_path}")
            continue
        paths = [_clip_path(manifest_path, e) for e in entries]
        outputs = Parallel(n_jobs=cfg.n_jobs)(
            delayed(_extract_one)(p, mode, cfg) for p in tqdm(paths, desc=f"{mode} {split_name}", unit="clip")
        )
        failures.extend((p, reason) for p, (_, reason) in zip(paths, outputs) if reason is not None)
        results[split_name] = (entries, outputs)
    if failures:
        raise UnreadableClipsError(failures)

    for split_name, (entries, outputs) in results.items():
        X = np.stack([value for value, _ in outputs]).astype(np.float32)
        y = manifest.labels(split_name).astype(np.float32)
        meta = DataManifest(mode=mode, split=split_name, data_hash=fingerprint,
                            class_order=list(cfg.class_order), n_clips=len(entries))
        path = write_container(out_dir / f"{mode}_{split_name}.mgt",
                               {"X": X, "y": y, MANIFEST_KEY: encode_json(meta.model_dump(mode="json"))})
        written[split_name] = path
        extract_logger.info(f"{split_name}: {X.shape} -> {path}")
        if mode == "features51":
            written[f"{split_name}_csv"] = _write_feature_csv(out_dir / f"{mode}_{split_name}.csv", entries, X)

    written["config"] = dump_run_config(cfg, out_dir / f"{mode}_config.yaml")

    if examples and mode == "melspec" and "train" in results:
        entries, outputs = results["train"]
        first = {}
        for entry, (value, _) in zip(entries, outputs):
            first.setdefault(entry.genre, value)
        for genre, values in first.items():
            written[f"example/{genre}"] = plot_melspectrogram(
                values, out_dir / "examples" / f"{genre.replace(' ', '_')}.svg", title=genre)
    return written


def decode_data_manifest(tensors: Dict[str, np.ndarray], path) -> DataManifest:
    try:
        return DataManifest(**read_metadata(tensors, path))
    except ValidationError as e:
        raise ArtifactMismatchError(f"{path}: invalid data manifest: {e}") from e


def load_split(path) -> Tuple[np.ndarray, np.ndarray, DataManifest]:
    """Read an extracted container back as (X, y, metadata)."""
    tensors = read_container(path)
    meta = decode_data_manifest(tensors, path)
    for key in ("X", "y"):
        if key not in tensors:
            raise ArtifactMismatchError(f"{path}: missing tensor '{key}'")
    return tensors["X"], tensors["y"].astype(np.int64), meta

