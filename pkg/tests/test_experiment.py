import json
import os

import numpy as np
import pytest
from PIL import Image

from app import experiment
from app.config import HEAD_TOPK_FRACTIONS
from app.errors import ConfigError, MetricError
from app.experiment import (
    EXIT_OK,
    EXIT_PARTIAL,
    ablation_variants,
    prepare_datasets,
    prepare_model,
    run_ablation,
    run_attribute,
    run_experiment,
)
from app.models import Architecture, AttributionConfig
from app.reports import REPORT_HEADER
from app.toyvlm import checkpoint_bytes


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def read_heatmap(path):
    with Image.open(path) as image:
        return np.asarray(image)


@pytest.mark.asyncio
async def test_experiment_counts_and_outputs(experiment_config, tmp_path):
    out = str(tmp_path / "run")
    outcome = await run_experiment(experiment_config, workers=1, out_dir=out)
    assert outcome.exit_code == EXIT_OK
    assert outcome.failed_samples == []

    lines = read_bytes(os.path.join(out, "report.csv")).decode().splitlines()
    assert lines[0] == REPORT_HEADER
    assert len(lines) == 1 + 3
    assert [line.split(",")[:3] for line in lines[1:]] == [[str(i), "raw_attention", "epg"] for i in range(3)]

    with open(os.path.join(out, "aggregate.json")) as f:
        aggregate = json.load(f)
    assert len(aggregate["aggregates"]) == 1
    assert aggregate["aggregates"][0]["count"] == 3

    for i in range(3):
        pixels = read_heatmap(os.path.join(out, "heatmaps", "raw_attention", f"sample_{i:04d}.pgm"))
        assert pixels.shape == (experiment_config.model.grid_h, experiment_config.model.grid_w)
    assert os.path.exists(os.path.join(out, "checkpoint.bin"))
    assert read_bytes(os.path.join(out, "loss.csv")).startswith(b"epoch,loss\n")
    assert os.path.exists(os.path.join(out, "dataset", "eval", "manifest.json"))


@pytest.mark.asyncio
async def test_reports_do_not_depend_on_worker_count(experiment_config, tmp_path):
    config = experiment_config.model_copy(update={"methods": ["dexar", "raw_attention"], "metrics": ["epg", "iou", "mse"]})
    single, pooled = str(tmp_path / "one"), str(tmp_path / "three")
    await run_experiment(config, workers=1, out_dir=single)
    await run_experiment(config, workers=3, out_dir=pooled)
    for name in ("report.csv", "aggregate.json"):
        assert read_bytes(os.path.join(single, name)) == read_bytes(os.path.join(pooled, name))
    for method in config.methods:
        for i in range(3):
            rel = os.path.join("heatmaps", method, f"sample_{i:04d}.pgm")
            assert read_bytes(os.path.join(single, rel)) == read_bytes(os.path.join(pooled, rel))


@pytest.mark.asyncio
async def test_curve_metrics_write_curve_files(experiment_config, tmp_path):
    config = experiment_config.model_copy(update={"metrics": ["auc_pos", "pic_auc"], "export_heatmaps": False})
    out = str(tmp_path / "curves")
    outcome = await run_experiment(config, out_dir=out)
    assert outcome.exit_code == EXIT_OK
    listing = sorted(os.listdir(os.path.join(out, "curves", "raw_attention")))
    assert "sample_0000_perturbation_positive.csv" in listing
    assert "sample_0000_pic.csv" in listing
    assert not os.path.exists(os.path.join(out, "heatmaps"))


@pytest.mark.asyncio
async def test_rollout_on_encoder_decoder_is_not_applicable(experiment_config, tmp_path):
    model = experiment_config.model.model_copy(update={"arch": Architecture.ENCODER_DECODER})
    config = experiment_config.model_copy(update={"model": model, "methods": ["rollout", "raw_attention"]})
    outcome = await run_experiment(config, out_dir=str(tmp_path / "ed"))
    assert outcome.exit_code == EXIT_OK
    assert {row.method for row in outcome.report.rows} == {"raw_attention"}
    for flags in outcome.report.flagged_samples.values():
        assert "rollout:not_applicable" in flags


@pytest.mark.asyncio
async def test_metric_failure_marks_sample_and_exit_code(experiment_config, tmp_path, monkeypatch):
    def broken(ctx, sample, amap, flags):
        raise MetricError("boom")

    monkeypatch.setitem(experiment.METRICS, "epg", broken)
    outcome = await run_experiment(experiment_config, out_dir=str(tmp_path / "broken"))
    assert outcome.exit_code == EXIT_PARTIAL
    assert outcome.failed_samples == [0, 1, 2]
    assert outcome.report.rows == []
    assert outcome.report.flagged_samples[0] == ["raw_attention:epg:failed"]


@pytest.mark.asyncio
async def test_workers_must_be_positive(experiment_config, tmp_path):
    with pytest.raises(ConfigError):
        await run_experiment(experiment_config, workers=0, out_dir=str(tmp_path / "zero"))


@pytest.mark.asyncio
async def test_model_and_dataset_are_reused(experiment_config, tmp_path):
    out = str(tmp_path / "reuse")
    train_set, _ = await prepare_datasets(experiment_config, out)
    first = await prepare_model(experiment_config, train_set, out)
    again, _ = await prepare_datasets(experiment_config, out)
    assert [s.scene.seed for s in again] == [s.scene.seed for s in train_set]
    second = await prepare_model(experiment_config, again, out)
    assert checkpoint_bytes(first) == checkpoint_bytes(second)

    wider = experiment_config.model_copy(update={"model": experiment_config.model.model_copy(update={"width": 32})})
    with pytest.raises(ConfigError):
        await prepare_model(wider, train_set, out)


@pytest.mark.asyncio
async def test_changed_dataset_spec_is_not_silently_reused(experiment_config, tmp_path):
    out = str(tmp_path / "stale")
    _, eval_set = await prepare_datasets(experiment_config, out)
    assert len(eval_set) == 3
    other = experiment_config.model_copy(update={
        "dataset": experiment_config.dataset.model_copy(update={"n_eval": 1, "seed": 99})})
    with pytest.raises(ConfigError):
        await prepare_datasets(other, out)

    _, fresh = await prepare_datasets(other, str(tmp_path / "fresh"))
    assert len(fresh) == 1
    assert fresh[0].scene.seed not in {s.scene.seed for s in eval_set}


@pytest.mark.asyncio
async def test_dataset_path_does_not_count_as_a_spec_change(experiment_config, tmp_path):
    shared = str(tmp_path / "shared-data")
    config = experiment_config.model_copy(update={
        "dataset": experiment_config.dataset.model_copy(update={"path": shared})})
    first, _ = await prepare_datasets(config, str(tmp_path / "a"))
    again, _ = await prepare_datasets(config, str(tmp_path / "b"))
    assert [s.scene.seed for s in again] == [s.scene.seed for s in first]
    with open(os.path.join(shared, "train", "manifest.json")) as f:
        assert json.load(f)["spec"]["path"] is None


@pytest.mark.asyncio
async def test_checkpoint_records_how_it_was_trained(experiment_config, tmp_path):
    out = str(tmp_path / "ckpt")
    train_set, _ = await prepare_datasets(experiment_config, out)
    await prepare_model(experiment_config, train_set, out)

    longer = experiment_config.model_copy(update={
        "training": experiment_config.training.model_copy(update={"epochs": 2})})
    with pytest.raises(ConfigError):
        await prepare_model(longer, train_set, out)
    reseeded = experiment_config.model_copy(update={"seed": experiment_config.seed + 1})
    with pytest.raises(ConfigError):
        await prepare_model(reseeded, train_set, out)


@pytest.mark.asyncio
async def test_vocabulary_must_fit_the_model(experiment_config, tmp_path):
    small = experiment_config.model_copy(update={"model": experiment_config.model.model_copy(update={"vocab_size": 8})})
    with pytest.raises(ConfigError):
        await prepare_datasets(small, str(tmp_path / "small"))


def test_ablation_variant_grid():
    variants = ablation_variants(AttributionConfig(), n_layers=4)
    assert len(variants) == 21
    by_grid = {}
    for v in variants:
        by_grid.setdefault(v.grid, []).append(v.name)
    assert by_grid["head_scoring"] == ["none", "max"] + [f"topk_{f:g}" for f in HEAD_TOPK_FRACTIONS] + ["avg"]
    assert by_grid["filtering"] == [
        "head_off_filler_off", "head_off_filler_on", "head_on_filler_off", "head_on_filler_on"]
    assert by_grid["relu_layers"] == [
        "relu_off_layers_last", "relu_off_layers_all", "relu_on_layers_last", "relu_on_layers_all"]
    last = next(v for v in variants if v.name == "relu_on_layers_last")
    assert last.attribution.layers_used == [4]
    assert last.metrics == ("iou",)


@pytest.mark.asyncio
async def test_ablation_run_writes_every_variant(experiment_config, tmp_path):
    out = str(tmp_path / "ablate")
    outcome = await run_ablation(experiment_config, out_dir=out)
    assert outcome.exit_code == EXIT_OK
    assert len(outcome.reports) == 21
    assert outcome.reports["filtering/head_on_filler_on"].summary("dexar").keys() == {"filler_snr", "mse", "epg"}
    assert os.path.exists(os.path.join(out, "ablation", "head_scoring", "topk_0.05", "report.csv"))
    lines = read_bytes(os.path.join(out, "ablation.csv")).decode().splitlines()
    assert lines[0] == "grid,variant,metric,mean,count"
    assert len(lines) == 1 + 12 * 2 + 4 * 3 + 4


@pytest.mark.asyncio
async def test_attribute_dumps_one_sample(experiment_config, tmp_path):
    config = experiment_config.model_copy(update={"methods": ["dexar", "gradcam"], "heatmap_scale": 2})
    out = str(tmp_path / "attr")
    maps = await run_attribute(config, sample_index=1, out_dir=out)
    assert sorted(maps) == ["dexar", "gradcam"]
    directory = os.path.join(out, "attribution", "sample_0001", "dexar")
    pixels = read_heatmap(os.path.join(directory, "sequence.pgm"))
    assert pixels.shape == (2 * config.model.grid_h, 2 * config.model.grid_w)
    n_tokens = len(maps["dexar"].tokens)
    assert os.path.exists(os.path.join(directory, f"token_{n_tokens:03d}.pgm"))
    with pytest.raises(ConfigError):
        await run_attribute(config, sample_index=3, out_dir=out)
