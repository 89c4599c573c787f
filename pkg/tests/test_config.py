import json

import pytest

from diddml.config import (
    AssignmentRule, ColumnRoles, RunConfig, THREADS_ENV, default_threads, dump_config, load_config,
)
from diddml.errors import ConfigError
from diddml.parallel import derive_seed, parallel_map


def _square(x):
    return x * x


def test_yaml_and_json_configs_load(tmp_path):
    yaml_path = tmp_path / "run.yaml"
    yaml_path.write_text("measure: price_ppp\ndiddml:\n  folds: 5\n  trim: 0.02\nseed: 3\n", encoding="utf-8")
    config = load_config(str(yaml_path))
    assert config.measure == "price_ppp"
    assert config.diddml.folds == 5
    assert config.estimator_config().seed == 3

    json_path = tmp_path / "run.json"
    json_path.write_text(json.dumps({"estimator": "twfe_binary"}), encoding="utf-8")
    assert load_config(str(json_path)).estimator == "twfe_binary"


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("", encoding="utf-8")
    config = load_config(str(path))
    assert config.diddml.folds == 10
    assert config.diddml.trim == 0.01
    assert config.assignment_rule() == AssignmentRule.default("tax_share")


@pytest.mark.parametrize("text", [
    "unknown_key: 1\n",
    "diddml:\n  trim: 0.5\n",
    "diddml:\n  folds: 1\n",
    "- just\n- a list\n",
])
def test_invalid_configs_raise_config_error(tmp_path, text):
    path = tmp_path / "bad.yaml"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "nope.yaml"))


def test_dumped_config_loads_back_equal(tmp_path):
    config = RunConfig(
        columns=ColumnRoles(outcome="smoker", cluster="country", treatment="d", period="t"),
        measure="price_ppp", seed=42,
    ).with_overrides(threads=3, output_dir=str(tmp_path / "out"))
    path = tmp_path / "config.yaml"
    dump_config(config, str(path))
    assert load_config(str(path)) == config


def test_rule_measure_must_match_the_run():
    config = RunConfig(measure="price_ppp", rule=AssignmentRule.default("tax_share"))
    with pytest.raises(ConfigError, match="does not match"):
        config.assignment_rule()


def test_roles_cannot_share_a_column():
    with pytest.raises(ValueError, match="more than one role"):
        ColumnRoles(outcome="y", cluster="y")


def test_thread_default_from_environment(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "6")
    assert default_threads() == 6
    assert RunConfig().estimator_config().threads == 6
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ConfigError):
        default_threads()


def test_parallel_map_keeps_input_order():
    assert parallel_map(_square, range(7), threads=1) == [0, 1, 4, 9, 16, 25, 36]
    assert parallel_map(_square, range(7), threads=3) == [0, 1, 4, 9, 16, 25, 36]


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(12345, 0) == derive_seed(12345, 0)
    seeds = {derive_seed(12345, fold, cell) for fold in range(10) for cell in range(5)}
    assert len(seeds) == 50
    assert all(0 <= s < 2**63 for s in seeds)


@pytest.mark.parametrize("name, text", [
    ("broken.json", "{not json"),
    ("broken.yaml", "diddml: [1, 2\n"),
    ("tabs.yaml", "diddml:\n\tfolds: 3\n"),
])
def test_malformed_config_files_raise_config_error(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError, match="unreadable config file"):
        load_config(str(path))
