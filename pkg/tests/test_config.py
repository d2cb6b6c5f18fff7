import pytest
import yaml

from config import GENRES, N_FRAMES, RunConfig, config_hash, data_hash, dump_run_config, load_run_config
from errors import ConfigError


def write_yaml(path, document) -> str:
    path.write_text(yaml.safe_dump(document))
    return str(path)


def test_defaults():
    cfg = load_run_config()
    assert cfg.class_order == GENRES
    assert cfg.architecture.n_classes == 8
    assert cfg.architecture.n_frames == N_FRAMES
    assert cfg.train.batch_size == 32
    assert cfg.dsp.melspec_hop is None


def test_file_then_flags(tmp_path):
    path = write_yaml(tmp_path / "run.yaml", {"seed": 3, "train": {"batch_size": 16}, "classical": {"knn_k": 7}})
    cfg = load_run_config(path, {"seed": 9})
    assert cfg.seed == 9
    assert cfg.train.seed == 9
    assert cfg.train.batch_size == 16
    assert cfg.train.patience == 10
    assert cfg.classical.knn_k == 7


def test_file_can_pin_training_seed(tmp_path):
    path = write_yaml(tmp_path / "run.yaml", {"train": {"seed": 42}})
    cfg = load_run_config(path, {"seed": 1})
    assert cfg.seed == 1
    assert cfg.train.seed == 42


def test_class_order_sets_output_count(tmp_path):
    path = write_yaml(tmp_path / "run.yaml", {"class_order": ["rap", "rock", "pop"]})
    assert load_run_config(path).architecture.n_classes == 3


@pytest.mark.parametrize("document", [
    {"unknown": 1},
    {"dsp": {"n_fft": 1000}},
    {"dsp": {"fmin": 5000.0, "fmax": 4000.0}},
    {"train": {"val_fraction": 1.0}},
    {"architecture": {"kernel_width": 4}},
    {"class_order": ["rap", "rap"]},
    {"class_order": ["rap", "rock"], "architecture": {"n_classes": 3}},
])
def test_invalid_settings(tmp_path, document):
    with pytest.raises(ConfigError) as err:
        load_run_config(write_yaml(tmp_path / "run.yaml", document))
    assert err.value.exit_code == 2


def test_invalid_yaml(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("train: [unclosed\n")
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_top_level_must_be_mapping(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "absent.yaml"))


def test_dumped_config_loads_back(tmp_path):
    cfg = load_run_config(None, {"seed": 5, "run_id": "r1"})
    path = dump_run_config(cfg, tmp_path / "r1_config.yaml")
    assert load_run_config(str(path)) == cfg


def test_config_hash_ignores_output_location():
    a = RunConfig(out_dir="/tmp/a", run_id="x", n_jobs=4)
    b = RunConfig(out_dir="/tmp/b", run_id="y")
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(RunConfig(seed=1))


def test_data_hash_follows_extraction_settings_only():
    base = RunConfig()
    assert data_hash(base) == data_hash(RunConfig(seed=7, train={"batch_size": 8}))
    assert data_hash(base) != data_hash(RunConfig(dsp={"melspec_hop": 512}))
    assert data_hash(base) != data_hash(RunConfig(features={"n_mfcc": 13}))
