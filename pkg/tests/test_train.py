import numpy as np
import pytest

from conftest import blobs, separable_spectrograms, tiny_arch, write_split
from config import RunConfig, TrainConfig
from errors import ConfigError, ContractError, LabelError, NumericFault
from models import build_model, load_checkpoint
from train import EarlyStopping, evaluate_loss, run_id_for, stratified_split, train, train_model

CLASSES = ["a", "b", "c"]


def quick_config(**overrides) -> TrainConfig:
    settings = dict(batch_size=8, max_epochs=25, patience=25, learning_rate=0.01, seed=0)
    settings.update(overrides)
    return TrainConfig(**settings)


def run_config(tmp_path, **train_overrides) -> RunConfig:
    return RunConfig(class_order=CLASSES, out_dir=str(tmp_path / "runs"), run_id="tiny",
                     architecture=tiny_arch().model_dump(), train=quick_config(**train_overrides).model_dump())


# --- early stopping ----------------------------------------------------------------

def test_early_stopping_counts_stagnant_epochs():
    stopper = EarlyStopping(patience=2, min_delta=1e-4)
    assert stopper.update(1.0, 1)
    assert stopper.update(0.9, 2)
    assert not stopper.update(0.95, 3)
    assert not stopper.should_stop
    assert not stopper.update(0.92, 4)
    assert stopper.should_stop
    assert stopper.best_epoch == 2


def test_small_improvement_is_kept_but_counts_as_stagnant():
    stopper = EarlyStopping(patience=3, min_delta=0.1)
    stopper.update(1.0, 1)
    assert stopper.update(0.95, 2)
    assert stopper.best_epoch == 2
    assert stopper.best_loss == 0.95
    assert stopper.wait == 1


def test_early_stopping_resets_after_improvement():
    stopper = EarlyStopping(patience=2)
    stopper.update(1.0, 1)
    stopper.update(1.0, 2)
    stopper.update(0.5, 3)
    assert stopper.wait == 0
    assert stopper.best_loss == 0.5


def test_early_stopping_rejects_zero_patience():
    with pytest.raises(ConfigError):
        EarlyStopping(patience=0)


# --- validation split --------------------------------------------------------------

def test_stratified_split_holds_out_every_class():
    y = np.array([0] * 10 + [1] * 10 + [2] * 1)
    train_idx, val_idx = stratified_split(y, 0.1, seed=4)
    assert sorted(np.concatenate([train_idx, val_idx]).tolist()) == list(range(21))
    assert np.bincount(y[val_idx], minlength=3).tolist() == [1, 1, 0]
    assert 20 in train_idx


def test_stratified_split_is_seeded():
    y = np.repeat(np.arange(4), 25)
    a = stratified_split(y, 0.2, seed=9)
    b = stratified_split(y, 0.2, seed=9)
    c = stratified_split(y, 0.2, seed=10)
    np.testing.assert_array_equal(a[1], b[1])
    assert not np.array_equal(a[1], c[1])
    assert a[1].size == 20


# --- training loop -----------------------------------------------------------------

def test_training_learns_separable_classes():
    X, y = separable_spectrograms(16)
    model = build_model(tiny_arch("cnn"), seed=1, class_order=CLASSES)
    train(model, X, y, quick_config())
    assert model.best_epoch >= 1
    assert model.metrics["train_acc"] >= 0.9
    assert model.metrics["val_loss"] == min(e.val_loss for e in model.curves)


@pytest.mark.slow
def test_crnn_fits_64_spectrograms_exactly():
    X, y = separable_spectrograms(8, n_classes=8, n_mels=16)
    model = build_model(tiny_arch("crnn", n_classes=8, n_mels=16), seed=0, class_order=list("abcdefgh"))
    seen = []
    train(model, X, y, quick_config(max_epochs=200, patience=200),
          stats_callback=seen.append, should_stop=lambda: bool(seen) and seen[-1]["accuracy"] == 1.0)
    assert len(seen) <= 200
    assert seen[-1]["accuracy"] == 1.0


def test_callbacks_and_external_stop():
    X, y = separable_spectrograms(16)
    model = build_model(tiny_arch(), seed=1, class_order=CLASSES)
    seen, completed = [], []
    train(model, X, y, quick_config(),
          stats_callback=seen.append,
          should_stop=lambda: len(seen) >= 2,
          on_train_complete=lambda: completed.append(True))
    assert [s["epoch"] for s in seen] == [1, 2]
    assert seen[0]["total_epochs"] == 25
    assert len(model.curves) == 2
    assert completed == [True]


def test_early_stopping_ends_training():
    X, y = separable_spectrograms(16)
    model = build_model(tiny_arch(), seed=1, class_order=CLASSES)
    # no later epoch can beat the first by this margin
    train(model, X, y, quick_config(min_delta=1e6, patience=3))
    assert len(model.curves) == 4
    assert model.curves[model.best_epoch - 1].val_loss == min(e.val_loss for e in model.curves)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_restored_parameters_reach_the_lowest_val_loss(seed):
    X, y = separable_spectrograms(8)
    tc = quick_config(max_epochs=40, patience=40, learning_rate=0.003, seed=seed)
    model = build_model(tiny_arch(), seed=seed, class_order=CLASSES)
    train(model, X, y, tc)
    lowest = min(e.val_loss for e in model.curves)
    assert model.curves[model.best_epoch - 1].val_loss == lowest
    _, val_idx = stratified_split(y, tc.val_fraction, tc.seed)
    assert evaluate_loss(model, X[val_idx], y[val_idx], tc.batch_size)[0] == lowest


def test_training_is_reproducible():
    X, y = separable_spectrograms(12)
    runs = []
    for _ in range(2):
        model = build_model(tiny_arch(), seed=2, class_order=CLASSES)
        train(model, X, y, quick_config(max_epochs=3))
        runs.append(model)
    assert [e.val_loss for e in runs[0].curves] == [e.val_loss for e in runs[1].curves]
    for name, value in runs[0].network.parameters().items():
        np.testing.assert_array_equal(value, runs[1].network.parameters()[name])


def test_fewer_samples_than_a_batch():
    X, y = separable_spectrograms(2)
    model = build_model(tiny_arch(), class_order=CLASSES)
    with pytest.raises(ContractError):
        train(model, X, y, quick_config())


def test_non_finite_input_reports_epoch_and_batch():
    X, y = separable_spectrograms(16)
    X[:, 0, 0] = np.inf
    model = build_model(tiny_arch(), class_order=CLASSES)
    with pytest.raises(NumericFault) as err:
        train(model, X, y, quick_config())
    assert err.value.epoch == 1
    assert err.value.batch == 0
    assert err.value.exit_code == 3


# --- orchestration -----------------------------------------------------------------

def test_train_model_writes_run_artifacts(tmp_path, capsys):
    X, y = separable_spectrograms(12)
    data = write_split(tmp_path / "melspec_train.mgt", X, y)
    cfg = run_config(tmp_path, max_epochs=3)
    model, written = train_model(cfg, data, "crnn")

    run_dir = tmp_path / "runs" / "tiny"
    assert set(written) == {"config", "curves_csv", "curves_svg", "checkpoint"}
    for name in ("tiny_config.yaml", "tiny_curves.csv", "tiny_curves.svg", "tiny_checkpoint.mgt"):
        assert (run_dir / name).exists()
    loaded, manifest = load_checkpoint(run_dir / "tiny_checkpoint.mgt")
    assert manifest.architecture == "crnn"
    assert manifest.data_hash == "test-data"
    assert manifest.epoch == model.best_epoch
    assert "training complete: tiny" in capsys.readouterr().out


def test_train_model_fits_baselines(tmp_path):
    X, y = blobs(10, 3, 51)
    data = write_split(tmp_path / "features51_train.mgt", X.astype(np.float32), y, mode="features51")
    completed = []
    model, written = train_model(run_config(tmp_path), data, "logreg",
                                 on_train_complete=lambda: completed.append(True))
    assert "curves_csv" not in written
    assert model.metrics["train_acc"] >= 0.9
    assert completed == [True]


def test_train_model_checks_input_mode(tmp_path):
    X, y = separable_spectrograms(12)
    data = write_split(tmp_path / "melspec_train.mgt", X, y)
    with pytest.raises(ConfigError, match="features51"):
        train_model(run_config(tmp_path), data, "knn")


def test_train_model_checks_class_order(tmp_path):
    X, y = separable_spectrograms(12)
    data = write_split(tmp_path / "melspec_train.mgt", X, y, class_order=("x", "y", "z"))
    with pytest.raises(LabelError):
        train_model(run_config(tmp_path), data, "crnn")


def test_run_id_defaults_to_config_hash(tmp_path):
    cfg = run_config(tmp_path).model_copy(update={"run_id": None})
    run_id = run_id_for(cfg, "cnn")
    assert run_id.startswith("cnn-")
    assert len(run_id) == len("cnn-") + 10
    assert run_id == run_id_for(cfg, "cnn")
