"""
Classification evaluation and report rendering.

Confusion counts use rows = true class, columns = predicted class, both in
the canonical class order. Rendered tables round to two decimals; CSV files
keep 17 significant digits.
"""

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from sklearn import metrics  # noqa: E402

from dataio import MANIFEST_KEY, read_container  # noqa: E402
from errors import (ArtifactMismatchError, ArtifactWriteError, DataError, DomainError, LabelError,  # noqa: E402
                    MissingArtifactError)
from log import get_logger  # noqa: E402
from models import decode_manifest  # noqa: E402
from schemas import TrainingEpoch  # noqa: E402

logger = get_logger("EVAL")

# fixed salt and no date keep SVG output byte-stable across runs
plt.rcParams["svg.hashsalt"] = "genre-eval"
SVG_METADATA = {"Date": None}

NAME_WIDTH = 16
RULE = "-" * (NAME_WIDTH + 27)
CURVE_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]


def _num(x) -> str:
    return format(float(x), ".17g")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_order: List[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0


@dataclass
class ClassReport:
    class_order: List[str]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro: Tuple[float, float, float]
    weighted: Tuple[float, float, float]
    accuracy: float


@dataclass
class RocCurve:
    label: str
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: Optional[float]

    @property
    def defined(self) -> bool:
        return self.auc is not None


def _label_indices(labels, class_order: Sequence[str]) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind in "US":
        index = {name: i for i, name in enumerate(class_order)}
        unknown = sorted({str(v) for v in labels} - set(index))
        if unknown:
            raise LabelError(f"unknown labels {unknown}")
        return np.array([index[str(v)] for v in labels], dtype=np.int64)
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= len(class_order)):
        raise LabelError(f"label indices must lie in [0, {len(class_order)})")
    return labels


def confusion(y_true, y_pred, class_order: Sequence[str]) -> ConfusionMatrix:
    t = _label_indices(y_true, class_order)
    p = _label_indices(y_pred, class_order)
    if t.shape != p.shape:
        raise LabelError(f"{t.shape[0]} true labels but {p.shape[0]} predictions")
    K = len(class_order)
    if t.size == 0:
        return ConfusionMatrix(np.zeros((K, K), dtype=np.int64), list(class_order))
    counts = metrics.confusion_matrix(t, p, labels=np.arange(K)).astype(np.int64)
    return ConfusionMatrix(counts, list(class_order))


def _labels_of(cm: ConfusionMatrix) -> Tuple[np.ndarray, np.ndarray]:
    K = len(cm.class_order)
    true_idx, pred_idx = np.indices((K, K))
    counts = cm.counts.ravel()
    return np.repeat(true_idx.ravel(), counts), np.repeat(pred_idx.ravel(), counts)


def classification_report(cm: ConfusionMatrix) -> ClassReport:
    """Per-class precision/recall/F1 with a zero-division convention of 0."""
    if cm.total == 0:
        raise DomainError("cannot report on an empty confusion matrix")
    t, p = _labels_of(cm)
    labels = np.arange(len(cm.class_order))
    precision, recall, f1, support = metrics.precision_recall_fscore_support(
        t, p, labels=labels, average=None, zero_division=0)
    averages = {}
    for average in ("macro", "weighted"):
        P, R, F, _ = metrics.precision_recall_fscore_support(t, p, labels=labels, average=average,
                                                             zero_division=0)
        averages[average] = (float(P), float(R), float(F))
    return ClassReport(cm.class_order, precision, recall, f1, support.astype(np.int64),
                       averages["macro"], averages["weighted"], cm.accuracy)


def roc_curve(positive: np.ndarray, scores: np.ndarray, label: str = "") -> RocCurve:
    """
    One-vs-rest ROC with one point per distinct score, so tied scores move
    TPR and FPR together.
    """
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(positive.sum())
    if n_pos == 0 or n_pos == positive.size:
        empty = np.zeros(0)
        return RocCurve(label, empty, empty, empty, None)
    fpr, tpr, thresholds = metrics.roc_curve(positive, scores, drop_intermediate=False)
    thresholds = thresholds.astype(np.float64)
    thresholds[0] = np.inf
    return RocCurve(label, thresholds, fpr, tpr, float(metrics.auc(fpr, tpr)))


def roc_auc(y_true, probs: np.ndarray, class_order: Sequence[str]) -> List[RocCurve]:
    probs = np.asarray(probs, dtype=np.float64)
    t = _label_indices(y_true, class_order)
    if probs.ndim != 2 or probs.shape != (t.shape[0], len(class_order)):
        raise DomainError(f"probabilities must be (N, {len(class_order)}), got {probs.shape}")
    if probs.size and not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise DomainError("probability rows must sum to 1")
    curves = []
    for k, name in enumerate(class_order):
        curve = roc_curve(t == k, probs[:, k], name)
        if not curve.defined:
            logger.warning(f"AUC undefined for '{name}': needs both positive and negative samples")
        curves.append(curve)
    return curves


# --- text report ----------------------------------------------------------------

@dataclass
class ReportRow:
    name: str
    precision: float
    recall: float
    f1: float
    support: int

    def render(self) -> str:
        return (f"{self.name:<{NAME_WIDTH}}  {self.precision:>6.2f}{self.recall:>6.2f}"
                f"{self.f1:>6.2f}{self.support:>7d}")


@dataclass
class ReportTable:
    """The rendered classification table, also what parse_report returns."""
    rows: List[ReportRow]
    macro: ReportRow
    weighted: ReportRow
    accuracy: float
    auc: Optional[List[Tuple[str, Optional[float]]]] = None

    @classmethod
    def from_report(cls, report: ClassReport, curves: Optional[Sequence[RocCurve]] = None) -> "ReportTable":
        rows = [ReportRow(name, float(p), float(r), float(f), int(s)) for name, p, r, f, s in
                zip(report.class_order, report.precision, report.recall, report.f1, report.support)]
        total = int(report.support.sum())
        auc = [(c.label, c.auc) for c in curves] if curves else None
        return cls(rows, ReportRow("Macro Avg", *report.macro, total),
                   ReportRow("Weighted Avg", *report.weighted, total), report.accuracy, auc)

    def render(self) -> str:
        lines = [f"{'Genre':<{NAME_WIDTH}}  {'Prec.':>6}{'Rec.':>6}{'F1':>6}{'Supp.':>7}", RULE]
        lines += [row.render() for row in self.rows]
        lines += [RULE, self.macro.render(), self.weighted.render(), RULE]
        lines.append(f"{'Overall Accuracy':<{NAME_WIDTH}}  {self.accuracy:.0%}")
        lines.append("")
        if not self.auc:
            lines.append("ROC AUC (one-vs-rest): absent")
        else:
            lines.append("ROC AUC (one-vs-rest)")
            for name, value in self.auc:
                shown = "undefined" if value is None else f"{value:.2f}"
                lines.append(f"{name:<{NAME_WIDTH}}  {shown:>6}")
        return "\n".join(lines) + "\n"

    def accuracy_percent(self) -> int:
        return int(f"{self.accuracy:.0%}"[:-1])


def format_report(report: ClassReport, curves: Optional[Sequence[RocCurve]] = None) -> str:
    return ReportTable.from_report(report, curves).render()


_ROW = re.compile(r"^(?P<name>.{%d})  \s*(?P<p>\d+\.\d\d)\s*(?P<r>\d+\.\d\d)\s*(?P<f>\d+\.\d\d)\s*(?P<s>\d+)$"
                  % NAME_WIDTH)
_ACCURACY = re.compile(r"^Overall Accuracy\s+(?P<pct>\d+)%$")
_AUC = re.compile(r"^(?P<name>.{%d})  \s*(?P<value>\d+\.\d\d|undefined)$" % NAME_WIDTH)


def parse_report(text: str) -> ReportTable:
    """Inverse of ReportTable.render, at the rendered precision."""
    lines = text.rstrip("\n").split("\n")
    rules = [i for i, line in enumerate(lines) if line == RULE]
    if len(rules) != 3:
        raise DataError("report text does not have the expected table rules")

    def row(line: str) -> ReportRow:
        m = _ROW.match(line)
        if not m:
            raise DataError(f"cannot parse report row: {line!r}")
        return ReportRow(m["name"].rstrip(), float(m["p"]), float(m["r"]), float(m["f"]), int(m["s"]))

    rows = [row(line) for line in lines[rules[0] + 1:rules[1]]]
    macro, weighted = (row(line) for line in lines[rules[1] + 1:rules[2]])
    m = _ACCURACY.match(lines[rules[2] + 1])
    if not m:
        raise DataError(f"cannot parse accuracy line: {lines[rules[2] + 1]!r}")
    accuracy = int(m["pct"]) / 100

    auc = None
    tail = lines[rules[2] + 3:]
    if tail and tail[0] == "ROC AUC (one-vs-rest)":
        auc = []
        for line in tail[1:]:
            a = _AUC.match(line)
            if not a:
                raise DataError(f"cannot parse AUC line: {line!r}")
            auc.append((a["name"].rstrip(), None if a["value"] == "undefined" else float(a["value"])))
    return ReportTable(rows, macro, weighted, accuracy, auc)


# --- CSV --------------------------------------------------------------------------

def _writer(path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", newline="", encoding="utf-8")
    except OSError as e:
        raise ArtifactWriteError(path, e) from e


def write_report_csv(report: ClassReport, path) -> Path:
    path = Path(path)
    with _writer(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "support"])
        for name, p, r, f1, s in zip(report.class_order, report.precision, report.recall, report.f1,
                                     report.support):
            w.writerow([name, _num(p), _num(r), _num(f1), int(s)])
        total = int(report.support.sum())
        w.writerow(["macro avg", *(_num(v) for v in report.macro), total])
        w.writerow(["weighted avg", *(_num(v) for v in report.weighted), total])
        w.writerow(["accuracy", "", "", _num(report.accuracy), total])
    return path


def write_confusion_csv(cm: ConfusionMatrix, path) -> Path:
    path = Path(path)
    with _writer(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["true\\predicted", *cm.class_order])
        for name, row in zip(cm.class_order, cm.counts):
            w.writerow([name, *(int(v) for v in row)])
    return path


def read_confusion_csv(path, class_order: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"confusion matrix not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    labels = rows[0][1:]
    if class_order is not None and list(class_order) != labels:
        raise DataError(f"{path}: class order {labels} differs from {list(class_order)}")
    counts = np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64)
    return ConfusionMatrix(counts, labels)


def write_roc_csv(curves: Sequence[RocCurve], path) -> Path:
    path = Path(path)
    with _writer(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", "threshold", "fpr", "tpr", "auc"])
        for c in curves:
            auc = "" if c.auc is None else _num(c.auc)
            if not c.defined:
                w.writerow([c.label, "", "", "", "undefined"])
            for t, x, y in zip(c.thresholds, c.fpr, c.tpr):
                w.writerow([c.label, _num(t), _num(x), _num(y), auc])
    return path


def write_curves_csv(curves: Sequence[TrainingEpoch], path) -> Path:
    path = Path(path)
    with _writer(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for e in curves:
            w.writerow([e.epoch, _num(e.train_loss), _num(e.train_acc), _num(e.val_loss), _num(e.val_acc)])
    return path


def read_curves_csv(path) -> List[TrainingEpoch]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"training curves not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        return [TrainingEpoch(**row) for row in csv.DictReader(f)]


# --- plots ------------------------------------------------------------------------

def _save_svg(path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        plt.savefig(path, format="svg", metadata=SVG_METADATA, bbox_inches="tight")
    except OSError as e:
        raise ArtifactWriteError(path, e) from e
    finally:
        plt.close()
    return path


def plot_confusion(cm: ConfusionMatrix, path) -> Path:
    plt.figure(figsize=(9, 8))
    plt.imshow(cm.counts, cmap="Blues")
    plt.colorbar()
    ticks = np.arange(len(cm.class_order))
    plt.xticks(ticks, cm.class_order, rotation=45, ha="right")
    plt.yticks(ticks, cm.class_order)
    threshold = cm.counts.max() / 2 if cm.counts.size else 0
    for i in range(cm.counts.shape[0]):
        for j in range(cm.counts.shape[1]):
            plt.text(j, i, str(cm.counts[i, j]), ha="center", va="center",
                     color="white" if cm.counts[i, j] > threshold else "black")
    plt.xlabel("Predicted genre")
    plt.ylabel("True genre")
    plt.title("Confusion matrix")
    return _save_svg(Path(path))


def plot_roc(curves: Sequence[RocCurve], path) -> Path:
    plt.figure(figsize=(8, 7))
    for c in curves:
        if c.defined:
            plt.plot(c.fpr, c.tpr, lw=1.5, label=f"{c.label} (AUC = {c.auc:.2f})")
    plt.plot([0, 1], [0, 1], "k--", lw=1)
    plt.xlim([0.0, 1.0])
    plt.ylim([0.0, 1.05])
    plt.xlabel("False positive rate")
    plt.ylabel("True positive rate")
    plt.title("ROC curves (one-vs-rest)")
    plt.legend(loc="lower right", fontsize=8)
    plt.grid(alpha=0.3)
    return _save_svg(Path(path))


def plot_training_curves(curves: Sequence[TrainingEpoch], path) -> Path:
    epochs = [e.epoch for e in curves]
    plt.figure(figsize=(12, 4))

    plt.subplot(1, 2, 1)
    plt.plot(epochs, [e.train_loss for e in curves], label="Training loss")
    plt.plot(epochs, [e.val_loss for e in curves], label="Validation loss")
    plt.title("Loss during training")
    plt.xlabel("Epoch")
    plt.ylabel("Loss")
    plt.legend()
    plt.grid(True)

    plt.subplot(1, 2, 2)
    plt.plot(epochs, [e.train_acc for e in curves], label="Training accuracy")
    plt.plot(epochs, [e.val_acc for e in curves], label="Validation accuracy")
    plt.title("Accuracy during training")
    plt.xlabel("Epoch")
    plt.ylabel("Accuracy")
    plt.legend()
    plt.grid(True)
    return _save_svg(Path(path))


def plot_melspectrogram(values: np.ndarray, path, title: str = "Mel spectrogram") -> Path:
    plt.figure(figsize=(10, 4))
    plt.imshow(np.asarray(values).T, origin="lower", aspect="auto", cmap="magma")
    plt.colorbar(format="%+2.0f dB")
    plt.xlabel("Frame")
    plt.ylabel("Mel band")
    plt.title(title)
    return _save_svg(Path(path))


def render_report(run_id: str, out_dir, report: ClassReport, cm: ConfusionMatrix,
                  curves: Sequence[RocCurve], training_curves: Optional[Sequence[TrainingEpoch]] = None
                  ) -> Dict[str, Path]:
    """Write every evaluation artifact as {run_id}_{artifact}.{ext}; returns them by artifact name."""
    out_dir = Path(out_dir)
    written: Dict[str, Path] = {}
    text_path = out_dir / f"{run_id}_report.txt"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path.write_text(format_report(report, curves), encoding="utf-8")
    except OSError as e:
        raise ArtifactWriteError(text_path, e) from e
    written["report"] = text_path
    written["report_csv"] = write_report_csv(report, out_dir / f"{run_id}_report.csv")
    written["confusion_csv"] = write_confusion_csv(cm, out_dir / f"{run_id}_confusion.csv")
    written["roc_csv"] = write_roc_csv(curves, out_dir / f"{run_id}_roc.csv")
    written["confusion_svg"] = plot_confusion(cm, out_dir / f"{run_id}_confusion.svg")
    written["roc_svg"] = plot_roc(curves, out_dir / f"{run_id}_roc.svg")
    if training_curves:
        written["curves_svg"] = plot_training_curves(training_curves, out_dir / f"{run_id}_curves.svg")
    for name, path in written.items():
        logger.debug(f"{name}: {path}")
    return written


# --- run comparison ------------------------------------------------------------------

@dataclass
class Comparison:
    ranking: List[Tuple[int, str, int]]
    class_order: List[str]
    f1: Dict[str, List[float]] = field(default_factory=dict)

    def render(self) -> str:
        width = max([len("Model")] + [len(name) for _, name, _ in self.ranking])
        lines = [f"{'Rank':>4}  {'Model':<{width}}  {'Accuracy':>8}"]
        lines += [f"{rank:>4}  {name:<{width}}  {pct:>7d}%" for rank, name, pct in self.ranking]
        lines.append("")
        names = [name for _, name, _ in self.ranking]
        cols = [max(len(n), 6) for n in names]
        lines.append(f"{'Genre':<{NAME_WIDTH}}" + "".join(f"  {n:>{c}}" for n, c in zip(names, cols)))
        for k, genre in enumerate(self.class_order + ["Macro Avg"]):
            lines.append(f"{genre:<{NAME_WIDTH}}"
                         + "".join(f"  {self.f1[n][k]:>{c}.2f}" for n, c in zip(names, cols)))
        return "\n".join(lines) + "\n"


def compare_runs(tables: Mapping[str, ReportTable]) -> Comparison:
    """
    Rank runs by whole-percent accuracy. Equal percentages share a rank and
    the next rank skips accordingly (1, 2, 2, 4).
    """
    if not tables:
        raise DomainError("nothing to compare")
    orders = {tuple(r.name for r in t.rows) for t in tables.values()}
    if len(orders) != 1:
        raise DataError("runs disagree on the class order")
    class_order = list(orders.pop())

    scored = sorted(((t.accuracy_percent(), name) for name, t in tables.items()), key=lambda x: -x[0])
    ranking, rank = [], 0
    for position, (pct, name) in enumerate(scored, start=1):
        if not ranking or pct != ranking[-1][2]:
            rank = position
        ranking.append((rank, name, pct))
    f1 = {name: [r.f1 for r in t.rows] + [t.macro.f1] for name, t in tables.items()}
    return Comparison(ranking, class_order, f1)


def write_comparison_csv(comparison: Comparison, path) -> Path:
    path = Path(path)
    names = [name for _, name, _ in comparison.ranking]
    with _writer(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["rank", "model", "accuracy_pct"])
        for rank, name, pct in comparison.ranking:
            w.writerow([rank, name, pct])
        w.writerow([])
        w.writerow(["genre", *names])
        for k, genre in enumerate(comparison.class_order + ["Macro Avg"]):
            w.writerow([genre, *(_num(comparison.f1[n][k]) for n in names)])
    return path


# --- run summary ----------------------------------------------------------------------

def find_run_id(run_dir) -> str:
    run_dir = Path(run_dir)
    checkpoints = sorted(run_dir.glob("*_checkpoint.mgt"))
    if not checkpoints:
        raise MissingArtifactError(f"no *_checkpoint.mgt in {run_dir}")
    if len(checkpoints) > 1:
        raise DataError(f"{run_dir} holds several checkpoints: {[p.name for p in checkpoints]}")
    return checkpoints[0].name[:-len("_checkpoint.mgt")]


def summarize_run(run_dir) -> str:
    """One text page for a finished run: manifest facts, metrics, report and artifact list."""
    run_dir = Path(run_dir)
    run_id = find_run_id(run_dir)
    checkpoint = run_dir / f"{run_id}_checkpoint.mgt"
    tensors = read_container(checkpoint)
    if MANIFEST_KEY not in tensors:
        raise ArtifactMismatchError(f"{checkpoint}: no checkpoint manifest")
    manifest = decode_manifest(tensors[MANIFEST_KEY], checkpoint)

    lines = [f"Run: {run_id}", f"Architecture: {manifest.architecture}",
             f"Input: {manifest.feature_mode}", f"Best epoch: {manifest.epoch}",
             f"Config hash: {manifest.config_hash}", f"Data hash: {manifest.data_hash}",
             f"Classes: {', '.join(manifest.class_order)}", "", "Training metrics"]
    lines += [f"  {key:<12}{value:.4f}" for key, value in sorted(manifest.metrics.items())] or ["  none"]

    curves_csv = run_dir / f"{run_id}_curves.csv"
    if curves_csv.exists():
        curves = read_curves_csv(curves_csv)
        lines.append(f"  epochs run  {len(curves)}")

    lines += ["", "Classification report"]
    report = run_dir / f"{run_id}_report.txt"
    if report.exists():
        lines += ["", report.read_text(encoding="utf-8").rstrip("\n")]
    else:
        lines.append("  not evaluated")

    summary_name = f"{run_id}_summary.txt"
    artifacts = sorted(p.name for p in run_dir.iterdir() if p.is_file() and p.name != summary_name)
    lines += ["", "Artifacts"] + [f"  {name}" for name in artifacts]
    return "\n".join(lines) + "\n"


def write_run_summary(run_dir) -> Path:
    run_dir = Path(run_dir)
    path = run_dir / f"{find_run_id(run_dir)}_summary.txt"
    text = summarize_run(run_dir)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ArtifactWriteError(path, e) from e
    return path
