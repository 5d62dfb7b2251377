import json
import os

import pytest

from app.cli import build_parser, load_config, main, resolve_output_dir
from app.config import OUTPUT_DIR_ENV
from app.errors import ConfigError
from app.models import ExperimentConfig


def write_config(tmp_path, config: ExperimentConfig, name="config.json") -> str:
    path = tmp_path / name
    path.write_text(config.to_json())
    return str(path)


def test_parser_defaults():
    args = build_parser().parse_args(["evaluate"])
    assert (args.command, args.workers, args.sample, args.seed, args.config) == ("evaluate", 1, 0, None, None)
    with pytest.raises(SystemExit):
        build_parser().parse_args(["serve"])


def test_config_json_round_trip(experiment_config):
    assert ExperimentConfig.from_json(experiment_config.to_json()) == experiment_config
    assert ExperimentConfig.from_json(experiment_config.to_json()).digest() == experiment_config.digest()


@pytest.mark.asyncio
async def test_seed_override_reaches_every_seed(experiment_config, tmp_path):
    config = await load_config(write_config(tmp_path, experiment_config), seed=42)
    assert (config.seed, config.dataset.seed, config.model.seed) == (42, 42, 42)
    with pytest.raises(ConfigError):
        experiment_config.with_seed(-1)


@pytest.mark.asyncio
async def test_unknown_method_is_a_config_error(experiment_config, tmp_path):
    payload = json.loads(experiment_config.to_json())
    payload["methods"] = ["lime"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(payload))
    assert await main(["evaluate", "--config", str(path), "--out", str(tmp_path / "out")]) == 1
    assert not os.path.exists(tmp_path / "out")


@pytest.mark.asyncio
async def test_missing_config_file(tmp_path):
    assert await main(["evaluate", "--config", str(tmp_path / "absent.json")]) == 1


@pytest.mark.asyncio
async def test_workers_must_be_positive(experiment_config, tmp_path):
    path = write_config(tmp_path, experiment_config)
    assert await main(["evaluate", "--config", path, "--workers", "0", "--out", str(tmp_path / "out")]) == 1


def test_output_dir_precedence(experiment_config, monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
    assert resolve_output_dir(experiment_config, None) == experiment_config.output_dir
    monkeypatch.setenv(OUTPUT_DIR_ENV, "/tmp/from-env")
    assert resolve_output_dir(experiment_config, None) == "/tmp/from-env"
    assert resolve_output_dir(experiment_config, "/tmp/explicit") == "/tmp/explicit"


@pytest.mark.asyncio
async def test_dataset_command_writes_both_splits(experiment_config, tmp_path, monkeypatch, capsys):
    out = tmp_path / "env-out"
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(out))
    assert await main(["dataset", "--config", write_config(tmp_path, experiment_config)]) == 0
    assert json.loads(capsys.readouterr().out) == {"train": 4, "eval": 3}
    for split in ("train", "eval"):
        assert (out / "dataset" / split / "manifest.json").exists()


@pytest.mark.asyncio
async def test_evaluate_command(experiment_config, tmp_path, capsys):
    out = tmp_path / "eval-out"
    code = await main(["evaluate", "--config", write_config(tmp_path, experiment_config), "--out", str(out),
                       "--workers", "2"])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert list(summary) == ["raw_attention"]
    assert set(summary["raw_attention"]) == {"epg"}
    assert (out / "report.csv").exists()


@pytest.mark.asyncio
async def test_attribute_out_of_range_sample_fails(experiment_config, tmp_path):
    path = write_config(tmp_path, experiment_config)
    assert await main(["attribute", "--config", path, "--out", str(tmp_path / "a"), "--sample", "9"]) == 1
