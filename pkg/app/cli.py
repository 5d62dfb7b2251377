# app/cli.py

import argparse
import asyncio
import json
import logging
import os
from typing import List, Optional

import aiofiles
from pydantic import ValidationError

from app.config import LOG_LEVEL, OUTPUT_DIR_ENV
from app.errors import DexArError
from app.experiment import (
    EXIT_CONFIG,
    EXIT_OK,
    prepare_datasets,
    prepare_model,
    run_ablation,
    run_attribute,
    run_experiment,
)
from app.models import ExperimentConfig

logger = logging.getLogger(__name__)

COMMANDS = ("dataset", "train", "attribute", "evaluate", "ablate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="DEX-AR attribution lab")
    parser.add_argument("command", choices=COMMANDS, help="Pipeline stage to run")
    parser.add_argument("--config", help="Experiment config (JSON)")
    parser.add_argument("--out", help=f"Output directory (overrides ${OUTPUT_DIR_ENV} and the config)")
    parser.add_argument("--workers", type=int, default=1, help="Worker threads for per-sample evaluation")
    parser.add_argument("--seed", type=int, help="Override run, dataset and initialisation seeds")
    parser.add_argument("--sample", type=int, default=0, help="Eval sample index for the attribute command")
    return parser


async def load_config(path: Optional[str], seed: Optional[int] = None) -> ExperimentConfig:
    """Parse and validate the config before any expensive work"""
    if path is None:
        config = ExperimentConfig()
    else:
        async with aiofiles.open(path, "r") as f:
            config = ExperimentConfig.from_json(await f.read())
    if seed is not None:
        config = config.with_seed(seed)
    return config


def resolve_output_dir(config: ExperimentConfig, out: Optional[str]) -> str:
    return out or os.environ.get(OUTPUT_DIR_ENV) or config.output_dir


async def dispatch(command: str, config: ExperimentConfig, out_dir: str, workers: int, sample: int = 0) -> int:
    if command == "dataset":
        train_set, eval_set = await prepare_datasets(config, out_dir)
        print(json.dumps({"train": len(train_set), "eval": len(eval_set)}, indent=2))
        return EXIT_OK

    if command == "train":
        train_set, _ = await prepare_datasets(config, out_dir)
        model = await prepare_model(config, train_set, out_dir)
        print(json.dumps({"arch": model.config.arch.value, "parameters": model.n_parameters()}, indent=2))
        return EXIT_OK

    if command == "attribute":
        maps = await run_attribute(config, sample, out_dir)
        print(json.dumps({m: [round(float(w), 6) for w in a.token_weights] for m, a in maps.items()}, indent=2))
        return EXIT_OK

    if command == "evaluate":
        outcome = await run_experiment(config, workers, out_dir)
        print(json.dumps({m: outcome.report.summary(m) for m in config.methods}, indent=2))
        return outcome.exit_code

    outcome = await run_ablation(config, workers, out_dir)
    print(json.dumps({key: {a.metric: a.mean for a in r.aggregates} for key, r in outcome.reports.items()}, indent=2))
    return outcome.exit_code


async def main(argv: Optional[List[str]] = None) -> int:
    """Run one pipeline stage; returns 0 on success, 1 on config or fatal errors, 2 on sample failures"""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = await load_config(args.config, args.seed)
    except (DexArError, ValidationError, OSError) as e:
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG
    if args.workers < 1:
        logger.error(f"Config error: --workers must be at least 1, got {args.workers}")
        return EXIT_CONFIG

    out_dir = resolve_output_dir(config, args.out)
    try:
        return await dispatch(args.command, config, out_dir, args.workers, args.sample)
    except DexArError as e:
        logger.error(f"Error: {e}")
        return EXIT_CONFIG


def configure_logging() -> None:
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


if __name__ == "__main__":
    configure_logging()
    raise SystemExit(asyncio.run(main()))
