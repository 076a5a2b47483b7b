import pytest

from ecgformer.config import ConfigError, ExperimentConfig, load_config
from ecgformer.model import ModelConfig


def test_empty_file_is_default(tmp_path):
    (tmp_path / "c.yaml").write_text("")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg == ExperimentConfig() == load_config(None)
    assert cfg.model == ModelConfig() and cfg.train.lr0 == 2e-3 and cfg.train.batch_size == 128
    assert cfg.split.ratios == (7, 1, 2)


def test_hash_stable_and_sensitive():
    a, b = ExperimentConfig(), ExperimentConfig.from_dict({})
    assert a.hash == b.hash
    assert a.hash != ExperimentConfig.from_dict({"seed": 1}).hash
    assert a.hash != ExperimentConfig.from_dict({"train": {"epochs": 3}}).hash


def test_sections_parsed(tmp_path):
    (tmp_path / "c.yaml").write_text(
        "seed: 4\nnoise_mode: balanced-mix-train\nmodel: {hidden: 32}\n"
        "train: {epochs: 7}\nfilters: {lowpass_cutoff_hz: 30.0}\nsplit: {ratios: [8, 1, 1]}\n"
        "exclude_records: ['108']\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.seed == cfg.train.seed == cfg.split.seed == 4
    assert cfg.train.noise_mode == "balanced-mix-train"
    assert cfg.model.hidden == 32 and cfg.train.epochs == 7
    assert cfg.filters.lowpass_cutoff_hz == 30.0 and cfg.split.ratios == (8, 1, 1)
    assert cfg.exclude_records == ("108",)


def test_rr_ablation_flag_propagates():
    cfg = ExperimentConfig.from_dict({"train": {"use_rr": False}})
    assert cfg.model.use_rr is False and cfg.train.use_rr is False
    cfg = ExperimentConfig.from_dict({"model": {"use_rr": False}})
    assert cfg.train.use_rr is False


@pytest.mark.parametrize("doc", [
    {"sed": 1},
    {"model": {"embed": 16}},
    {"model": {"embed_dim": 15}},
    {"noise_mode": "loud"},
    {"train": {"lr0": -1}},
])
def test_invalid_configs(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_malformed_yaml(tmp_path):
    (tmp_path / "a.yaml").write_text("model: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "a.yaml")
    (tmp_path / "b.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "b.yaml")


def test_overrides():
    cfg = ExperimentConfig().with_overrides(seed=9)
    assert cfg.seed == cfg.train.seed == cfg.split.seed == 9
    assert ExperimentConfig().with_overrides(**{"train.epochs": 5}).train.epochs == 5
    assert ExperimentConfig().with_overrides(seed=None) == ExperimentConfig()


def test_roundtrip_through_dict():
    cfg = ExperimentConfig.from_dict({"seed": 2, "model": {"heads": 4}, "split": {"n_folds": 3}})
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
