"""
Command-line entry point.

    python src/main.py prep    --in songs/ --out data/ --train-per-genre 900 --test-per-genre 100
    python src/main.py extract --manifest data/manifest.csv --out data/ --mode melspec
    python src/main.py train   --data data/melspec_train.mgt --arch crnn --out runs/
    python src/main.py eval    --checkpoint runs/<run_id>/<run_id>_checkpoint.mgt --data data/melspec_test.mgt
    python src/main.py predict --checkpoint ... --wav song.wav
    python src/main.py report  --run-dir runs/<run_id>
    python src/main.py compare --run-dir runs/a runs/b --out runs/

Exit codes: 0 success, 1 I/O problem, 2 user or configuration error, 3 numeric fault.
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

SRC_DIR = Path(__file__).resolve().parent
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

from config import CLASSICAL_ARCHS, DEEP_ARCHS, RUNS_DIR, dump_run_config, load_run_config  # noqa: E402
from errors import ArtifactMismatchError, ConfigError, GenreError, MissingArtifactError  # noqa: E402
from evaluate import (classification_report, compare_runs, confusion, find_run_id, format_report,  # noqa: E402
                      parse_report, read_curves_csv, render_report, roc_auc, write_comparison_csv,
                      write_run_summary)
from log import configure_logging, get_logger  # noqa: E402
from models import predict  # noqa: E402
from predict import classify_wav, find_latest_checkpoint, load_model  # noqa: E402
from preprocess import MODES, extract_dataset, load_split, prepare_dataset  # noqa: E402
from train import train_model  # noqa: E402

logger = get_logger("MAIN")

CHECKPOINT_SUFFIX = "_checkpoint.mgt"


def _config(args, **overrides):
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        overrides["n_jobs"] = args.jobs
    if getattr(args, "run_id", None):
        overrides["run_id"] = args.run_id
    return load_run_config(args.config, overrides)


def _run_id_of(checkpoint: Path) -> str:
    name = checkpoint.name
    return name[:-len(CHECKPOINT_SUFFIX)] if name.endswith(CHECKPOINT_SUFFIX) else checkpoint.stem


def cmd_prep(args) -> int:
    cfg = _config(args)
    prepare_dataset(args.in_dir, args.out, cfg, args.train_per_genre, args.test_per_genre)
    return 0


def cmd_extract(args) -> int:
    cfg = _config(args)
    written = extract_dataset(args.manifest, args.out, cfg, args.mode, examples=args.examples)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, out_dir=str(args.out))
    train_model(cfg, args.data, args.arch)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    checkpoint = Path(args.checkpoint)
    model, manifest = load_model(checkpoint)
    X, y, meta = load_split(args.data)
    if manifest.data_hash and meta.data_hash != manifest.data_hash:
        raise ArtifactMismatchError(f"{args.data} was extracted with data hash {meta.data_hash[:12]}, "
                                    f"the checkpoint expects {manifest.data_hash[:12]}")
    if meta.mode != model.feature_mode:
        raise ConfigError(f"{manifest.architecture} expects '{model.feature_mode}' data, {args.data} holds '{meta.mode}'")
    if meta.class_order != model.class_order:
        raise ArtifactMismatchError("data and checkpoint disagree on the class order")

    probs, labels = predict(model, X, cfg.train.batch_size)
    cm = confusion(y, labels, model.class_order)
    report = classification_report(cm)
    curves = roc_auc(y, probs, model.class_order)

    run_id = _run_id_of(checkpoint)
    out_dir = Path(args.out) / run_id if args.out else checkpoint.parent
    curves_csv = checkpoint.parent / f"{run_id}_curves.csv"
    training_curves = read_curves_csv(curves_csv) if curves_csv.exists() else None
    render_report(run_id, out_dir, report, cm, curves, training_curves)
    dump_run_config(cfg, out_dir / f"{run_id}_eval_config.yaml")
    print(format_report(report, curves), end="")
    print(f"\nevaluation saved in {out_dir}")
    return 0


def cmd_predict(args) -> int:
    cfg = _config(args)
    checkpoint = Path(args.checkpoint) if args.checkpoint else find_latest_checkpoint(args.runs)
    if checkpoint is None:
        raise MissingArtifactError("no checkpoint given and none found; train a model first")
    model, _ = load_model(checkpoint, cfg)
    print(classify_wav(model, args.wav, cfg).render(), end="")
    return 0


def cmd_report(args) -> int:
    path = write_run_summary(args.run_dir)
    print(path.read_text(encoding="utf-8"), end="")
    return 0


def cmd_compare(args) -> int:
    tables = {}
    for run_dir in args.run_dir:
        run_dir = Path(run_dir)
        run_id = find_run_id(run_dir)
        report = run_dir / f"{run_id}_report.txt"
        if not report.exists():
            raise MissingArtifactError(f"{report} not found; run eval first")
        tables[run_id] = parse_report(report.read_text(encoding="utf-8"))
    comparison = compare_runs(tables)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.txt").write_text(comparison.render(), encoding="utf-8")
    write_comparison_csv(comparison, out / "comparison.csv")
    print(comparison.render(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="YAML run configuration")
    common.add_argument("--seed", type=int, default=None, help="seed for every randomised step")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(description="music genre classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", parents=[common], help="segment songs into 30 s clips and split them")
    p.add_argument("--in", dest="in_dir", required=True, help="folder with <genre>/<song>.wav")
    p.add_argument("--out", required=True, help="destination for clips and manifest.csv")
    p.add_argument("--train-per-genre", type=int, default=900)
    p.add_argument("--test-per-genre", type=int, default=100)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("extract", parents=[common], help="turn a manifest into tensor containers")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES, default="melspec")
    p.add_argument("--jobs", type=int, default=None, help="parallel workers (default from config)")
    p.add_argument("--examples", action="store_true", help="plot one spectrogram per genre")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common], help="train one architecture")
    p.add_argument("--data", required=True, help="<mode>_train.mgt from extract")
    p.add_argument("--arch", choices=DEEP_ARCHS + CLASSICAL_ARCHS, default="crnn")
    p.add_argument("--out", default=str(RUNS_DIR))
    p.add_argument("--run-id", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a test container")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="default: the checkpoint's folder")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="classify one WAV file")
    p.add_argument("--checkpoint", default=None, help="default: latest checkpoint under --runs")
    p.add_argument("--runs", default=str(RUNS_DIR))
    p.add_argument("--wav", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", parents=[common], help="summarise a finished run")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", parents=[common], help="rank several evaluated runs")
    p.add_argument("--run-dir", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except GenreError as e:
        logger.error(str(e))
        return e.exit_code
    except OSError as e:
        logger.error(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
