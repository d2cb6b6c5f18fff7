import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from config import CLASSICAL_ARCHS, DEEP_ARCHS, RunConfig, TrainConfig, config_hash, dump_run_config
from errors import ConfigError, ContractError, DataError, LabelError, NumericFault
from evaluate import plot_training_curves, write_curves_csv
from log import get_logger
from models import (InputStats, TrainedModel, build_model, checkpoint_manifest, fit_baseline, predict,
                    save_checkpoint)
from neural import AdamState, adam_step, cross_entropy_grad, one_hot, softmax_cross_entropy
from preprocess import load_split
from schemas import TrainingEpoch, TrainingStats

logger = get_logger("TRAINING")


class EarlyStopping:
    """
    Stagnation rule on validation loss. Patience counts epochs that fail to
    beat the last significant best by at least min_delta; the restore target
    is the lowest loss seen, however small the step that reached it.
    """

    def __init__(self, patience: int = 10, min_delta: float = 1e-4):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = np.inf
        self.best_epoch = 0
        self.reference_loss = np.inf
        self.wait = 0

    def update(self, val_loss: float, epoch: int) -> bool:
        """Record an epoch; returns True when it is the new lowest loss."""
        if self.reference_loss - val_loss >= self.min_delta:
            self.reference_loss = val_loss
            self.wait = 0
        else:
            self.wait += 1
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


def stratified_split(y: np.ndarray, val_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Hold out round(val_fraction * n_c) samples of every class c, at least one
    for classes with two or more samples and never the whole class.
    """
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng([seed, 1])
    train_idx, val_idx = [], []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        n_val = int(round(val_fraction * members.size))
        if members.size >= 2:
            n_val = min(max(n_val, 1), members.size - 1)
        else:
            n_val = 0
        shuffled = members[rng.permutation(members.size)]
        val_idx.append(shuffled[:n_val])
        train_idx.append(shuffled[n_val:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))


def evaluate_loss(model: TrainedModel, X: np.ndarray, y: np.ndarray, batch_size: int = 32) -> Tuple[float, float]:
    """Cross-entropy and accuracy in inference mode."""
    probs, labels = predict(model, X, batch_size)
    y = np.asarray(y, dtype=np.int64)
    picked = np.clip(probs[np.arange(y.shape[0]), y], 1e-300, None)
    return float(-np.mean(np.log(picked))), float(np.mean(labels == y))


def _snapshot(model: TrainedModel) -> Dict[str, np.ndarray]:
    state = {f"param/{k}": v.copy() for k, v in model.network.parameters().items()}
    for name, layer, key in model.network.named_buffers():
        state[f"buffer/{name}"] = layer.buffers[key].copy()
    return state


def _restore(model: TrainedModel, state: Dict[str, np.ndarray]) -> None:
    for name, layer, key in model.network.named_parameters():
        layer.params[key][...] = state[f"param/{name}"]
    for name, layer, key in model.network.named_buffers():
        layer.buffers[key] = state[f"buffer/{name}"].copy()


def train(model: TrainedModel, X: np.ndarray, y: np.ndarray, tc: Optional[TrainConfig] = None,
          stats_callback: Optional[Callable] = None,
          should_stop: Optional[Callable] = None,
          on_train_complete: Optional[Callable] = None) -> TrainedModel:
    """
    model: untrained deep model from build_model
    X: (N, frames, mels) spectrograms in dB
    y: (N,) class indices
    tc: batch size, epochs, patience, validation fraction, seed, Adam settings
    stats_callback: called after each epoch with a TrainingStats dict
    should_stop: returns True to end training early (checked before and after each epoch)
    on_train_complete: called once training ends, early stop included
    """
    tc = tc or TrainConfig()
    arch = model.architecture
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] != y.shape[0]:
        raise DataError(f"{X.shape[0]} spectrograms but {y.shape[0]} labels")
    if X.shape[0] < tc.batch_size:
        raise ContractError(f"need at least batch_size={tc.batch_size} samples, got {X.shape[0]}")
    targets = one_hot(y, model.n_classes)

    train_idx, val_idx = stratified_split(y, tc.val_fraction, tc.seed)
    if val_idx.size == 0:
        raise DataError("validation split is empty; every class needs at least two samples")
    model.input_stats = InputStats.fit(X[train_idx])
    net = model.network
    params = net.parameters()
    decayed = net.decayed()
    opt = AdamState(tc.learning_rate, tc.beta1, tc.beta2, tc.epsilon)
    shuffle_rng = np.random.default_rng([tc.seed, 2])
    stopper = EarlyStopping(tc.patience, tc.min_delta)
    best_state = _snapshot(model)
    start_time = time.time()

    logger.info(f"{train_idx.size} train / {val_idx.size} validation samples, "
                f"batch size {tc.batch_size}, up to {tc.max_epochs} epochs")
    model.curves = []
    for epoch in range(1, tc.max_epochs + 1):
        if should_stop and should_stop():
            break
        epoch_start = time.time()
        net.train()
        order = train_idx[shuffle_rng.permutation(train_idx.size)]
        loss_sum, correct = 0.0, 0
        for batch, start in enumerate(range(0, order.size, tc.batch_size)):
            rows = order[start:start + tc.batch_size]
            xb = model.input_stats.apply(X[rows])
            yb = targets[rows]
            try:
                logits = net.forward(xb)
                loss, probs = softmax_cross_entropy(logits, yb)
                if not np.isfinite(loss):
                    raise NumericFault("non-finite training loss")
                net.backward(cross_entropy_grad(probs, yb).astype(xb.dtype))
            except NumericFault as e:
                raise NumericFault(str(e), epoch=epoch, batch=batch) from e
            adam_step(params, net.gradients(), opt, arch.l2, decayed)
            loss_sum += loss * rows.size
            correct += int(np.sum(np.argmax(probs, axis=1) == y[rows]))

        train_loss = loss_sum / train_idx.size
        train_acc = correct / train_idx.size
        val_loss, val_acc = evaluate_loss(model, X[val_idx], y[val_idx], tc.batch_size)
        if not np.isfinite(val_loss):
            raise NumericFault("non-finite validation loss", epoch=epoch)
        model.curves.append(TrainingEpoch(epoch=epoch, train_loss=train_loss, train_acc=train_acc,
                                          val_loss=val_loss, val_acc=val_acc))
        if stopper.update(val_loss, epoch):
            best_state = _snapshot(model)

        logger.info(f"epoch {epoch}/{tc.max_epochs} - loss {train_loss:.4f} - acc {train_acc:.4f} "
                    f"- val_loss {val_loss:.4f} - val_acc {val_acc:.4f}")
        stopping = stopper.should_stop or bool(should_stop and should_stop())
        if stats_callback:
            elapsed = time.time() - start_time
            stats_callback(TrainingStats(
                epoch=epoch, total_epochs=tc.max_epochs, loss=train_loss, accuracy=train_acc,
                val_loss=val_loss, val_accuracy=val_acc, learning_rate=tc.learning_rate,
                batch_size=tc.batch_size, time_elapsed=elapsed,
                eta=(time.time() - epoch_start) * (tc.max_epochs - epoch),
                best_epoch=stopper.best_epoch, stopping=stopping,
            ).model_dump())
        if stopping:
            if stopper.should_stop:
                logger.info(f"early stopping: no val_loss improvement for {tc.patience} epochs")
            break

    _restore(model, best_state)
    model.best_epoch = stopper.best_epoch
    if model.best_epoch:
        best = model.curves[model.best_epoch - 1]
        model.metrics = {"train_loss": best.train_loss, "train_acc": best.train_acc,
                         "val_loss": best.val_loss, "val_acc": best.val_acc}
        logger.info(f"restored parameters from epoch {model.best_epoch} (val_loss {best.val_loss:.4f})")
    if on_train_complete:
        on_train_complete()
    return model


# --- orchestration ------------------------------------------------------------------

@dataclass
class TrainingData:
    X: np.ndarray
    y: np.ndarray
    mode: str
    data_hash: str
    class_order: list


def load_training_data(path) -> TrainingData:
    X, y, meta = load_split(path)
    return TrainingData(X, y, meta.mode, meta.data_hash, meta.class_order)


def run_id_for(cfg: RunConfig, arch: str) -> str:
    return cfg.run_id or f"{arch}-{config_hash(cfg)[:10]}"


def train_model(cfg: RunConfig, data_path, arch: str,
                stats_callback: Optional[Callable] = None,
                should_stop: Optional[Callable] = None,
                on_train_complete: Optional[Callable] = None) -> Tuple[TrainedModel, Dict[str, Path]]:
    """
    Train one architecture on an extracted container and write
    {run_id}_checkpoint.mgt, {run_id}_config.yaml and, for deep models,
    {run_id}_curves.csv / .svg under cfg.out_dir/{run_id}/.
    """
    data = load_training_data(data_path)
    if arch in DEEP_ARCHS and data.mode != "melspec":
        raise ConfigError(f"architecture '{arch}' trains on mel spectrograms, but {data_path} holds "
                          f"'{data.mode}' data; run extract with --mode melspec")
    if arch in CLASSICAL_ARCHS and data.mode != "features51":
        raise ConfigError(f"baseline '{arch}' trains on 51-feature vectors, but {data_path} holds "
                          f"'{data.mode}' data; run extract with --mode features51")
    if arch not in DEEP_ARCHS and arch not in CLASSICAL_ARCHS:
        raise ConfigError(f"unknown architecture '{arch}'")
    if data.class_order != list(cfg.class_order):
        raise LabelError(f"data class order {data.class_order} differs from the config's {cfg.class_order}")

    if arch in DEEP_ARCHS:
        cfg = cfg.model_copy(update={"architecture": cfg.architecture.model_copy(update={
            "kind": arch, "n_frames": int(data.X.shape[1]), "n_mels": int(data.X.shape[2])})})
    run_id = run_id_for(cfg, arch)
    out_dir = Path(cfg.out_dir) / run_id
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {"config": dump_run_config(cfg, out_dir / f"{run_id}_config.yaml")}

    if arch in DEEP_ARCHS:
        model = build_model(cfg.architecture, cfg.train.seed, list(cfg.class_order))
        logger.info(f"{arch}: {sum(p.size for p in model.network.parameters().values())} parameters")
        train(model, data.X, data.y, cfg.train, stats_callback, should_stop, on_train_complete)
        written["curves_csv"] = write_curves_csv(model.curves, out_dir / f"{run_id}_curves.csv")
        written["curves_svg"] = plot_training_curves(model.curves, out_dir / f"{run_id}_curves.svg")
    else:
        model = fit_baseline(arch, data.X, data.y, cfg.classical, cfg.seed, list(cfg.class_order))
        if on_train_complete:
            on_train_complete()

    manifest = checkpoint_manifest(model, config_hash(cfg), data.data_hash)
    written["checkpoint"] = save_checkpoint(model, out_dir / f"{run_id}_checkpoint.mgt", manifest)

    print("=" * 60)
    print(f"training complete: {run_id}")
    for key, value in model.metrics.items():
        print(f"  {key:<10} {value:.4f}")
    print(f"outputs in: {out_dir}")
    print("=" * 60)
    return model, written
