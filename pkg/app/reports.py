# app/reports.py

import json
import os
from typing import Dict, Sequence

import aiofiles
import numpy as np

from app.errors import ReportError
from app.metrics import Curve
from app.models import MetricReport

REPORT_HEADER = "sample_id,method,metric,value"


def _fmt(value: float) -> str:
    return f"{value:.12g}"


async def _write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    async with aiofiles.open(path, "w", newline="\n") as f:
        await f.write(text)


def report_csv(report: MetricReport) -> str:
    lines = [REPORT_HEADER]
    for row in sorted(report.rows, key=lambda r: (r.sample_id, r.method, r.metric)):
        lines.append(f"{row.sample_id},{row.method},{row.metric},{_fmt(row.value)}")
    return "\n".join(lines) + "\n"


async def write_report_csv(report: MetricReport, path: str) -> None:
    """Per-sample rows ordered by sample, method, metric; 12 significant digits"""
    await _write_text(path, report_csv(report))


async def write_aggregate_json(report: MetricReport, path: str) -> None:
    payload = {
        "schema_version": report.schema_version,
        "model_arch": report.model_arch,
        "config_digest": report.config_digest,
        "aggregates": [
            {"method": a.method, "metric": a.metric, "mean": float(_fmt(a.mean)), "count": a.count}
            for a in report.aggregates
        ],
        "flagged_samples": {str(k): v for k, v in report.flagged_samples.items()},
    }
    await _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


async def write_curve_csv(curve: Curve, path: str) -> None:
    with_entropy = any(p.entropy_norm is not None for p in curve.points)
    lines = ["p,ppl,ppl_norm,entropy_norm" if with_entropy else "p,ppl,ppl_norm"]
    for p in curve.points:
        cells = [_fmt(p.p), _fmt(p.ppl), _fmt(p.ppl_norm)]
        if with_entropy:
            cells.append(_fmt(p.entropy_norm))
        lines.append(",".join(cells))
    await _write_text(path, "\n".join(lines) + "\n")


async def write_loss_curve(losses: Sequence[float], path: str) -> None:
    lines = ["epoch,loss"] + [f"{i},{_fmt(loss)}" for i, loss in enumerate(losses, start=1)]
    await _write_text(path, "\n".join(lines) + "\n")


def pgm_bytes(grid: np.ndarray, scale: int = 1) -> bytes:
    """Binary PGM of a [0, 1] grid, optionally upsampled by nearest neighbour"""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ReportError(f"heatmap must be two-dimensional, got shape {grid.shape}")
    if not np.all((grid >= 0.0) & (grid <= 1.0)):
        raise ReportError("heatmap entries must lie in [0, 1]")
    if scale < 1:
        raise ReportError(f"scale must be at least 1, got {scale}")
    if scale > 1:
        grid = np.repeat(np.repeat(grid, scale, axis=0), scale, axis=1)
    h, w = grid.shape
    payload = np.rint(255.0 * grid).astype(np.uint8).tobytes()
    return f"P5\n{w} {h}\n255\n".encode("ascii") + payload


async def export_heatmap_pgm(grid: np.ndarray, path: str, scale: int = 1) -> None:
    data = pgm_bytes(grid, scale)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    async with aiofiles.open(path, "wb") as f:
        await f.write(data)


async def write_ablation_csv(reports: Dict[str, MetricReport], path: str) -> None:
    """One line per (variant, metric) mean; keys are "grid/variant" in run order"""
    lines = ["grid,variant,metric,mean,count"]
    for key, report in reports.items():
        grid, variant = key.split("/", 1)
        for agg in report.aggregates:
            lines.append(f"{grid},{variant},{agg.metric},{_fmt(agg.mean)},{agg.count}")
    await _write_text(path, "\n".join(lines) + "\n")
