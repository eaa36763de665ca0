from pathlib import Path
from unittest.mock import patch

import pytest

from saandet.exceptions import ConfigError
from saandet.settings import config_hash, import_settings


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 11\nfusion: xcorr\ntrain:\n  steps: 40\nbudget:\n  k: 3\n  rho: inf\n", encoding="utf-8")
    return path


def test_defaults_without_config_file():
    config, found = import_settings()
    assert found is False
    assert config.fusion == "gru"
    assert config.detector.size == "tiny"
    assert config.budget.k == 10


def test_config_file(config_file):
    config, found = import_settings(config_file)
    assert found is True
    assert config.seed == 11
    assert config.fusion == "xcorr"
    assert config.train.steps == 40
    assert config.budget.k == 3
    assert config.budget.rho is None


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        import_settings(tmp_path / "nope.yaml")


def test_invalid_config_file(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("fusion: attention\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        import_settings(path)


def test_env_settings(config_file):
    with patch.dict(
        "os.environ",
        {
            "SAAN_SEED": "5",
            "SAAN_TRAIN__LR": "0.02",
            "XAAN_SEED": "9",
            "SAAN_OUTPUT_ROOT": "/tmp/saan-runs",
        },
    ):
        config, found = import_settings(config_file)
        assert found
        assert config.seed == 5
        assert config.train.lr == 0.02
        assert config.train.steps == 40
        assert config.output_dir == Path("/tmp/saan-runs")


def test_overrides_win_over_env(config_file):
    with patch.dict("os.environ", {"SAAN_SEED": "5"}):
        config, _ = import_settings(config_file, {"seed": 8, "train": {"steps": 3}})
    assert config.seed == 8
    assert config.train.steps == 3
    assert config.budget.k == 3


def test_detector_preset():
    config, _ = import_settings(overrides={"detector": {"size": "full"}})
    assert config.detector.stride == 16
    assert config.detector.feature_dim == 1024
    assert config.base_lr == 1e-2


def test_config_hash_ignores_output_dir():
    a, _ = import_settings(overrides={"output_dir": "a"})
    b, _ = import_settings(overrides={"output_dir": "b"})
    c, _ = import_settings(overrides={"seed": 1})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert len(config_hash(a)) == 12
