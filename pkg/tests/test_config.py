try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

import pytest
import yaml

from rccformer.core.errors import ConfigError
from rccformer.core.model_config import (ModelConfig, Preset, RunConfig,
                                         apply_overrides, dump_run_config, eval_threads,
                                         flatten, get_run_config, load_run_config,
                                         unflatten)
from rccformer.enums import AttentionMode, FusionMode

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_desk_preset_defaults(monkeypatch):
    monkeypatch.delenv("RCC_PRESET", raising=False)
    config = get_run_config()
    assert config.optimizer.lr == 1e-3
    assert config.model.fusion_mode == FusionMode.MFFM
    assert config.model.attention_mode == AttentionMode.DEA
    assert (config.loss.lambda1, config.loss.lambda2) == (0.1, 0.01)
    assert config.record_timing is False


def test_full_preset():
    config = get_run_config(Preset.FULL)
    assert config.optimizer.lr == 1e-5
    assert config.optimizer.weight_decay == 1e-4
    assert config.batch_size == 16


def test_preset_from_environment(monkeypatch):
    monkeypatch.setenv("RCC_PRESET", "full")
    assert get_run_config().batch_size == 16
    monkeypatch.setenv("RCC_PRESET", "laptop")
    with pytest.raises(ConfigError):
        get_run_config()


def test_presets_are_fresh_copies():
    a = get_run_config(Preset.DESK)
    a.epochs = 3
    assert get_run_config(Preset.DESK).epochs == 30


def test_flatten_and_unflatten():
    tree = {"a": 1, "b": {"c": 2, "d": {"e": [1, 2]}}}
    flat = flatten(tree)
    assert flat == {"a": 1, "b.c": 2, "b.d.e": [1, 2]}
    assert unflatten(flat) == tree


def test_overrides_apply_and_validate():
    overrides = {"model.deab_depth": 3, "model.fusion_mode": "add"}
    config = apply_overrides(RunConfig(), overrides)
    assert config.model.deab_depth == 3
    assert config.model.fusion_mode == FusionMode.ADD
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_overrides(RunConfig(), {"model.depth": 3})
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), {"crop": 40})


def test_load_flat_yaml(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("epochs: 2\nmodel.local_kernel: 7\nsynth.image_size: 64\n")
    config = load_run_config(path, Preset.DESK)
    assert config.epochs == 2
    assert config.model.local_kernel == 7
    assert config.synth.image_size == 64


@pytest.mark.parametrize("text", ["epochs: [", "- 1\n- 2\n", "model.local_kernel: 4\n",
                                  "modle.local_kernel: 5\n"])
def test_bad_files_rejected(tmp_path, text):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_run_config(path, Preset.DESK)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "absent.yaml")


def test_shipped_configs_load():
    desk = load_run_config(CONFIGS / "desk.yaml", Preset.DESK)
    assert desk == get_run_config(Preset.DESK).model_copy(update={"out": "runs/desk"})
    full = load_run_config(CONFIGS / "full.yaml", Preset.DESK)
    assert full.model.fusion_channels == 128


def test_dump_round_trip(tmp_path, mini_run):
    path = tmp_path / "dump.yaml"
    dump_run_config(mini_run, path)
    flat = yaml.safe_load(path.read_text())
    assert flat["model.backbone.stage_channels"] == [8, 8, 16, 16]
    assert not any(isinstance(value, dict) for value in flat.values())
    assert load_run_config(path, Preset.DESK) == mini_run


def test_model_config_checks():
    with pytest.raises(ValueError):
        ModelConfig(local_kernel=4)
    with pytest.raises(ValueError):
        ModelConfig(fusion_channels=10, attention_heads=4)
    with pytest.raises(ValueError):
        RunConfig(unknown=1)


def test_eval_threads(monkeypatch):
    monkeypatch.delenv("RCC_THREADS", raising=False)
    assert eval_threads() == 1
    monkeypatch.setenv("RCC_THREADS", "4")
    assert eval_threads() == 4
    monkeypatch.setenv("RCC_THREADS", "many")
    with pytest.raises(ConfigError):
        eval_threads()


def test_line_length_matches_formatter_settings():
    root = Path(__file__).parents[1]
    with open(root / "pyproject.toml", "rb") as f:
        tools = tomllib.load(f)["tool"]
    limit = tools["black"]["line-length"]
    assert limit == tools["isort"]["line_length"] == 88
    sources = [root / "app.py", *(root / "rccformer").rglob("*.py"),
               *(root / "tests").rglob("*.py")]
    long_lines = []
    for path in sources:
        lines = path.read_text(encoding="utf-8").splitlines()
        long_lines += [f"{path.name}:{n}" for n, line in enumerate(lines, 1)
                       if len(line) > limit]
    assert long_lines == []
