import json
import logging

import pytest

from ssbnn.config import load_config, load_run_spec, setup_logging, to_default_map
from ssbnn.data.validators import ValidationError
from ssbnn.errors import InvalidParameterError


def test_load_config_by_suffix(tmp_path):
    yaml_path = tmp_path / "run.yaml"
    yaml_path.write_text("arch: 784,128,10\nepochs: 5\n")
    json_path = tmp_path / "run.json"
    json_path.write_text(json.dumps({"arch": "2,2", "seed": 3}))
    assert load_config(str(yaml_path)) == {"arch": "784,128,10", "epochs": 5}
    assert load_config(str(json_path))["seed"] == 3
    empty = tmp_path / "empty.yml"
    empty.write_text("")
    assert load_config(str(empty)) == {}


def test_load_config_errors(tmp_path):
    with pytest.raises(InvalidParameterError):
        load_config(str(tmp_path / "missing.yaml"))
    other = tmp_path / "run.toml"
    other.write_text("x = 1")
    with pytest.raises(InvalidParameterError):
        load_config(str(other))
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(ValidationError):
        load_config(str(broken))


def test_run_spec_schema(tmp_path):
    good = tmp_path / "good.yaml"
    good.write_text("arch: 2,4,2\ndataset: synthetic\ncommands:\n  eval:\n    R: 5\n")
    assert load_run_spec(str(good))["commands"]["eval"]["R"] == 5
    bad = tmp_path / "bad.yaml"
    bad.write_text("arch: 2,4,2\nlearning_rate: 0.1\n")
    with pytest.raises(ValidationError):
        load_run_spec(str(bad))
    wrong = tmp_path / "wrong.yaml"
    wrong.write_text("psi: 1.5\n")
    with pytest.raises(ValidationError):
        load_run_spec(str(wrong))


def test_default_map_prefers_command_entries():
    spec = {"seed": 1, "dataset": "synthetic", "commands": {"eval": {"seed": 2}}}
    default_map = to_default_map(spec, ["train", "eval"])
    assert default_map["train"] == {"seed": 1, "dataset": "synthetic"}
    assert default_map["eval"] == {"seed": 2, "dataset": "synthetic"}


def test_setup_logging_levels(tmp_path, monkeypatch):
    monkeypatch.delenv("SSBNN_LOG_CONFIG", raising=False)
    monkeypatch.delenv("SSBNN_LOG_LEVEL", raising=False)
    setup_logging("debug")
    assert logging.getLogger("ssbnn").level == logging.DEBUG
    monkeypatch.setenv("SSBNN_LOG_LEVEL", "WARNING")
    setup_logging()
    assert logging.getLogger("ssbnn").level == logging.WARNING
    with pytest.raises(InvalidParameterError):
        setup_logging("chatty")
    setup_logging(config_file=str(tmp_path / "missing.yaml"))
    setup_logging("INFO")
