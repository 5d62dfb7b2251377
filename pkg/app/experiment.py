# app/experiment.py

"""
Experiment harness: datasets, model, attribution and the metric battery.

Samples are evaluated on a thread pool behind an asyncio semaphore and
gathered in sample order, so report bytes do not depend on the worker count.
Timings go to the log only.
"""

import asyncio
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.attribution import AttributionMap, GradientBank, explain, write_attribution_dump
from app.config import HEAD_TOPK_FRACTIONS
from app.errors import ConfigError, DexArError, UnsupportedArchitectureError
from app.metrics import (
    NEGATIVE,
    POSITIVE,
    Curve,
    PerturbationSchedule,
    deletion_curve,
    epg,
    filler_snr,
    insertion_curve,
    iou_best_threshold,
    mse_metric,
    perturbation_curve,
    pic_curve,
    snr_db,
    soft_iou,
    token_energy,
)
from app.models import AttributionConfig, ExperimentConfig, HeadScoring, MetricReport, MetricRow, TrainingRecord
from app.performance import OperationTimer, PerformanceMonitor
from app.reports import (
    export_heatmap_pgm,
    write_ablation_csv,
    write_aggregate_json,
    write_curve_csv,
    write_loss_curve,
    write_report_csv,
)
from app.synthdata import (
    MANIFEST,
    QASample,
    Vocabulary,
    dataset_mean_pixel,
    deserialize_dataset,
    make_dataset,
    mean_image,
    read_manifest,
    serialize_dataset,
)
from app.toyvlm import GenerationTrace, ToyVLM, read_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2


@dataclass
class SampleResult:
    sample_id: int
    rows: List[MetricRow] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)
    failed: bool = False
    curves: Dict[str, Curve] = field(default_factory=dict)        # "method/curve" -> curve
    grids: Dict[str, np.ndarray] = field(default_factory=dict)    # method -> sequence grid
    timings: Dict[str, float] = field(default_factory=dict)       # method -> seconds


@dataclass
class ExperimentOutcome:
    report: MetricReport
    results: List[SampleResult]
    output_dir: str

    @property
    def failed_samples(self) -> List[int]:
        return [r.sample_id for r in self.results if r.failed]

    @property
    def exit_code(self) -> int:
        return EXIT_PARTIAL if self.failed_samples else EXIT_OK


@dataclass
class EvalContext:
    """Read-only state shared by every worker"""
    model: ToyVLM
    config: ExperimentConfig
    fill: np.ndarray        # dataset mean pixel
    base_image: np.ndarray  # mean image for the information curve


# --- datasets and model ------------------------------------------------------------

def _dataset_root(config: ExperimentConfig, out_dir: str) -> str:
    return config.dataset.path or os.path.join(out_dir, "dataset")


async def _load_or_make(config: ExperimentConfig, vocab: Vocabulary, root: str, split: str) -> List[QASample]:
    directory = os.path.join(root, split)
    if os.path.exists(os.path.join(directory, MANIFEST)):
        manifest = await read_manifest(directory)
        if manifest.spec != config.dataset.without_path() or manifest.image_side != config.model.image_side:
            raise ConfigError(f"dataset in {directory} was generated from a different dataset spec or image size; "
                              f"remove it or choose another output directory")
        samples = await deserialize_dataset(directory, vocab, config.model.patch_size)
        logger.info(f"Loaded {len(samples)} {split} samples from {directory}")
        return samples
    samples = make_dataset(config.dataset, config.model, vocab, split)
    await serialize_dataset(samples, directory, config.model, config.dataset)
    return samples


async def prepare_datasets(config: ExperimentConfig, out_dir: str,
                           vocab: Optional[Vocabulary] = None) -> Tuple[List[QASample], List[QASample]]:
    """Train and eval splits, read from disk when present and generated otherwise

    A split on disk is only reused when its manifest records the same dataset spec; anything else is a ConfigError.
    """
    vocab = vocab or Vocabulary()
    if len(vocab) > config.model.vocab_size:
        raise ConfigError(f"vocabulary of {len(vocab)} words exceeds model vocab_size {config.model.vocab_size}")
    root = _dataset_root(config, out_dir)
    train_set = await _load_or_make(config, vocab, root, "train")
    eval_set = await _load_or_make(config, vocab, root, "eval")
    return train_set, eval_set


def _checkpoint_path(config: ExperimentConfig, out_dir: str) -> str:
    return config.checkpoint or os.path.join(out_dir, "checkpoint.bin")


def training_record(config: ExperimentConfig) -> TrainingRecord:
    return TrainingRecord(seed=config.seed, training=config.training, dataset=config.dataset.without_path())


async def prepare_model(config: ExperimentConfig, train_set: Sequence[QASample], out_dir: str) -> ToyVLM:
    """Load the checkpoint if one exists, otherwise train and save it with its loss curve"""
    path = _checkpoint_path(config, out_dir)
    if os.path.exists(path):
        model, header = await read_checkpoint(path)
        if model.config != config.model:
            raise ConfigError(f"checkpoint {path} was trained with a different model config")
        if header.record != training_record(config):
            raise ConfigError(f"checkpoint {path} was trained with a different seed, training or dataset spec")
        logger.info(f"Loaded checkpoint {path}")
        return model

    model = ToyVLM(config.model)
    losses = train(model, train_set, config.training, seed=config.seed)
    await save_checkpoint(model, path, training_record(config))
    await write_loss_curve(losses, os.path.join(os.path.dirname(os.path.abspath(path)), "loss.csv"))
    return model


def make_trace(model: ToyVLM, sample: QASample, force_answer: bool) -> GenerationTrace:
    if force_answer:
        return model.teacher_force(sample.image, sample.prompt_ids, sample.answer_ids)
    return model.generate(sample.image, sample.prompt_ids)


# --- metric battery ---------------------------------------------------------------

MetricFn = Callable[[EvalContext, QASample, AttributionMap, List[str]], Tuple[float, Optional[Curve]]]


def _curve_metric(build: Callable[[EvalContext, QASample, np.ndarray], Curve]) -> MetricFn:
    def metric(ctx, sample, amap, flags):
        curve = build(ctx, sample, amap.sequence_grid)
        flags.extend(curve.flags)
        return curve.auc, curve
    return metric


def _perturbation(polarity: str):
    def build(ctx, sample, heat):
        schedule = PerturbationSchedule(fill=ctx.fill, polarity=polarity)
        return perturbation_curve(ctx.model, sample, heat, schedule, ctx.config.exp_normalization)
    return build


def _insertion(ctx, sample, heat):
    return insertion_curve(ctx.model, sample, heat, PerturbationSchedule(fill=ctx.fill),
                           ctx.config.exp_normalization)


def _deletion(ctx, sample, heat):
    return deletion_curve(ctx.model, sample, heat, PerturbationSchedule(fill=ctx.fill),
                          ctx.config.exp_normalization)


def _pic(ctx, sample, heat):
    return pic_curve(ctx.model, sample, heat, ctx.base_image)


def _filler_snr(ctx, sample, amap, flags):
    return filler_snr(token_energy(amap), sample.filler_mask), None


METRICS: Dict[str, MetricFn] = {
    "auc_pos": _curve_metric(_perturbation(POSITIVE)),
    "auc_neg": _curve_metric(_perturbation(NEGATIVE)),
    "auc_insertion": _curve_metric(_insertion),
    "auc_deletion": _curve_metric(_deletion),
    "pic_auc": _curve_metric(_pic),
    "iou": lambda ctx, s, amap, flags: (iou_best_threshold(amap.sequence_grid, s.union_grid()), None),
    "soft_iou": lambda ctx, s, amap, flags: (soft_iou(amap.sequence_grid, s.union_grid()), None),
    "epg": lambda ctx, s, amap, flags: (epg(amap.sequence_grid, s.union_grid(), flags), None),
    "snr_db": lambda ctx, s, amap, flags: (snr_db(amap.sequence_grid, s.union_grid()), None),
    "mse": lambda ctx, s, amap, flags: (mse_metric(amap.sequence_grid, s.union_grid()), None),
    "filler_snr": _filler_snr,
}


def evaluate_sample(ctx: EvalContext, sample: QASample) -> SampleResult:
    """Attribute one sample with every configured method and score it; never raises DexArError"""
    result = SampleResult(sample.index)
    config = ctx.config
    try:
        trace = make_trace(ctx.model, sample, config.force_answer)
        bank = GradientBank(ctx.model, trace)
    except DexArError as e:
        logger.warning(f"Sample {sample.index}: trace failed: {e}")
        result.flags.append("trace_failed")
        result.failed = True
        return result

    for method in config.methods:
        start = time.perf_counter()
        try:
            amap = explain(method, ctx.model, trace, config.attribution, bank)
        except UnsupportedArchitectureError as e:
            logger.info(f"Sample {sample.index}: {method} skipped: {e}")
            result.flags.append(f"{method}:not_applicable")
            continue
        except DexArError as e:
            logger.warning(f"Sample {sample.index}: {method} failed: {e}")
            result.flags.append(f"{method}:failed")
            result.failed = True
            continue
        result.timings[method] = time.perf_counter() - start
        result.grids[method] = amap.sequence_grid

        for metric in config.metrics:
            flags: List[str] = []
            try:
                value, curve = METRICS[metric](ctx, sample, amap, flags)
            except DexArError as e:
                logger.warning(f"Sample {sample.index}: {method}/{metric} failed: {e}")
                result.flags.append(f"{method}:{metric}:failed")
                result.failed = True
                continue
            result.flags.extend(f"{method}:{metric}:{flag}" for flag in flags)
            if curve is not None:
                result.curves[f"{method}/{curve.name}"] = curve
            if not math.isfinite(value):
                result.flags.append(f"{method}:{metric}:non_finite")
                continue
            result.rows.append(MetricRow(sample_id=sample.index, method=method, metric=metric, value=value))
    return result


async def evaluate_samples(ctx: EvalContext, samples: Sequence[QASample], workers: int = 1,
                           monitor: Optional[PerformanceMonitor] = None) -> List[SampleResult]:
    """Evaluate on a thread pool; results come back in the order of ``samples``"""
    if workers < 1:
        raise ConfigError(f"workers must be at least 1, got {workers}")
    monitor = monitor or PerformanceMonitor()
    loop = asyncio.get_running_loop()
    semaphore = asyncio.Semaphore(workers)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        async def run(sample: QASample) -> SampleResult:
            async with semaphore:
                async with OperationTimer(monitor, "evaluate_sample"):
                    return await loop.run_in_executor(pool, evaluate_sample, ctx, sample)

        results = await asyncio.gather(*(run(s) for s in samples))

    for result in results:
        for method, seconds in result.timings.items():
            await monitor.record_operation(f"attribution.{method}", seconds, True)
    return list(results)


def build_report(config: ExperimentConfig, results: Sequence[SampleResult]) -> MetricReport:
    rows = [row for r in results for row in r.rows]
    flagged = {r.sample_id: sorted(set(r.flags)) for r in results if r.flags}
    return MetricReport.from_rows(rows, config.model.arch.value, config.digest(), flagged)


async def write_outputs(config: ExperimentConfig, report: MetricReport, results: Sequence[SampleResult],
                        out_dir: str) -> None:
    await write_report_csv(report, os.path.join(out_dir, "report.csv"))
    await write_aggregate_json(report, os.path.join(out_dir, "aggregate.json"))
    for r in results:
        for key, curve in sorted(r.curves.items()):
            method = key.split("/", 1)[0]
            await write_curve_csv(curve, os.path.join(out_dir, "curves", method, f"sample_{r.sample_id:04d}_{curve.name}.csv"))
        if config.export_heatmaps:
            for method, grid in sorted(r.grids.items()):
                path = os.path.join(out_dir, "heatmaps", method, f"sample_{r.sample_id:04d}.pgm")
                await export_heatmap_pgm(grid, path, config.heatmap_scale)


async def _log_timings(monitor: PerformanceMonitor) -> None:
    for op, seconds in (await monitor.seconds_per_call()).items():
        logger.info(f"{op}: {seconds:.4f} s per image")
    summary = await monitor.get_summary()
    if summary["error_rate"]:
        logger.warning(f"{summary['error_rate']}% of timed operations raised")
        for error in await monitor.get_recent_errors():
            logger.warning(f"{error['operation']}: {error['error']}")


async def _context(config: ExperimentConfig, out_dir: str) -> Tuple[EvalContext, List[QASample]]:
    train_set, eval_set = await prepare_datasets(config, out_dir)
    if not eval_set:
        raise ConfigError("evaluation split is empty")
    model = await prepare_model(config, train_set, out_dir)
    ctx = EvalContext(model=model, config=config, fill=dataset_mean_pixel(eval_set), base_image=mean_image(eval_set))
    return ctx, eval_set


async def run_experiment(config: ExperimentConfig, workers: int = 1, out_dir: Optional[str] = None) -> ExperimentOutcome:
    """Evaluate every configured method and metric on the eval split and write all report files"""
    out_dir = out_dir or config.output_dir
    ctx, eval_set = await _context(config, out_dir)
    monitor = PerformanceMonitor()
    logger.info(f"Evaluating {len(eval_set)} samples with methods {config.methods} on {workers} workers")
    results = await evaluate_samples(ctx, eval_set, workers, monitor)
    report = build_report(config, results)
    await write_outputs(config, report, results, out_dir)
    await _log_timings(monitor)

    outcome = ExperimentOutcome(report, results, out_dir)
    for method in config.methods:
        summary = report.summary(method)
        if summary:
            logger.info(f"{method}: " + ", ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    if outcome.failed_samples:
        logger.warning(f"{len(outcome.failed_samples)} samples failed: {outcome.failed_samples}")
    return outcome


# --- ablations ------------------------------------------------------------------

@dataclass(frozen=True)
class AblationVariant:
    grid: str
    name: str
    attribution: AttributionConfig
    metrics: Tuple[str, ...]


@dataclass
class AblationOutcome:
    reports: Dict[str, MetricReport]   # "grid/variant" -> report
    failed_samples: List[int]
    output_dir: str

    @property
    def exit_code(self) -> int:
        return EXIT_PARTIAL if self.failed_samples else EXIT_OK


def ablation_variants(base: AttributionConfig, n_layers: int) -> List[AblationVariant]:
    """Head-scoring modes, the head x filler filtering grid and the ReLU x layers grid"""
    variants = []
    heads = ("snr_db", "mse")
    variants.append(AblationVariant("head_scoring", "none", base.model_copy(update={"head_filtering": False}), heads))
    variants.append(AblationVariant("head_scoring", "max", base.model_copy(
        update={"head_filtering": True, "head_scoring_mode": HeadScoring.MAX}), heads))
    for fraction in HEAD_TOPK_FRACTIONS:
        variants.append(AblationVariant("head_scoring", f"topk_{fraction:g}", base.model_copy(
            update={"head_filtering": True, "head_scoring_mode": HeadScoring.TOPK, "topk_fraction": fraction}), heads))
    variants.append(AblationVariant("head_scoring", "avg", base.model_copy(
        update={"head_filtering": True, "head_scoring_mode": HeadScoring.AVG}), heads))

    for head in (False, True):
        for filler in (False, True):
            name = f"head_{'on' if head else 'off'}_filler_{'on' if filler else 'off'}"
            variants.append(AblationVariant("filtering", name, base.model_copy(
                update={"head_filtering": head, "filler_filtering": filler}), ("filler_snr", "mse", "epg")))

    for relu in (False, True):
        for intermediate in (False, True):
            layers = None if intermediate else [n_layers]
            name = f"relu_{'on' if relu else 'off'}_layers_{'all' if intermediate else 'last'}"
            variants.append(AblationVariant("relu_layers", name, base.model_copy(
                update={"relu_on_grad": relu, "layers_used": layers}), ("iou",)))
    return variants


async def run_ablation(config: ExperimentConfig, workers: int = 1, out_dir: Optional[str] = None) -> AblationOutcome:
    """DEX-AR under every ablation variant; one report per variant plus ablation.csv"""
    out_dir = out_dir or config.output_dir
    ctx, eval_set = await _context(config, out_dir)
    monitor = PerformanceMonitor()
    reports: Dict[str, MetricReport] = {}
    failed: List[int] = []

    for variant in ablation_variants(config.attribution, config.model.layers):
        variant_config = config.model_copy(update={
            "attribution": variant.attribution,
            "methods": ["dexar"],
            "metrics": list(variant.metrics),
            "export_heatmaps": False,
        })
        variant_ctx = EvalContext(ctx.model, variant_config, ctx.fill, ctx.base_image)
        results = await evaluate_samples(variant_ctx, eval_set, workers, monitor)
        failed.extend(r.sample_id for r in results if r.failed)
        report = build_report(variant_config, results)
        key = f"{variant.grid}/{variant.name}"
        reports[key] = report
        variant_dir = os.path.join(out_dir, "ablation", variant.grid, variant.name)
        await write_report_csv(report, os.path.join(variant_dir, "report.csv"))
        await write_aggregate_json(report, os.path.join(variant_dir, "aggregate.json"))
        logger.info(f"{key}: " + ", ".join(f"{a.metric}={a.mean:.4f}" for a in report.aggregates))

    await write_ablation_csv(reports, os.path.join(out_dir, "ablation.csv"))
    await _log_timings(monitor)
    if failed:
        logger.warning(f"{len(set(failed))} samples failed in at least one variant")
    return AblationOutcome(reports, sorted(set(failed)), out_dir)


# --- single-sample attribution ---------------------------------------------------

async def run_attribute(config: ExperimentConfig, sample_index: int = 0,
                        out_dir: Optional[str] = None) -> Dict[str, AttributionMap]:
    """Attribute one eval sample with every configured method and dump maps and heatmaps"""
    out_dir = out_dir or config.output_dir
    ctx, eval_set = await _context(config, out_dir)
    if not 0 <= sample_index < len(eval_set):
        raise ConfigError(f"sample index {sample_index} outside 0..{len(eval_set) - 1}")
    sample = eval_set[sample_index]
    trace = make_trace(ctx.model, sample, config.force_answer)
    bank = GradientBank(ctx.model, trace)
    words = Vocabulary().decode(trace.tokens)

    maps: Dict[str, AttributionMap] = {}
    for method in config.methods:
        try:
            amap = explain(method, ctx.model, trace, config.attribution, bank)
        except UnsupportedArchitectureError as e:
            logger.info(f"{method} skipped: {e}")
            continue
        maps[method] = amap
        directory = os.path.join(out_dir, "attribution", f"sample_{sample.index:04d}", method)
        await write_attribution_dump(amap, directory, words)
        await export_heatmap_pgm(amap.sequence_grid, os.path.join(directory, "sequence.pgm"), config.heatmap_scale)
        for t, grid in enumerate(amap.per_token_grid, start=1):
            await export_heatmap_pgm(grid, os.path.join(directory, f"token_{t:03d}.pgm"), config.heatmap_scale)
    return maps
