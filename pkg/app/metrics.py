# app/metrics.py

"""
Evaluation battery for attribution maps.

Faithfulness curves perturb the image pixel by pixel following the upsampled
map and track the teacher-forced perplexity of the ground-truth answer.
Localisation scores compare the token grid against ground-truth cell masks.
"""

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.ndimage import gaussian_filter

from app.config import (
    INSERTION_SIGMA_AT_224,
    IOU_THRESHOLDS,
    LOG_PROB_FLOOR,
    PERTURBATION_PERCENTAGES,
    SNR_EPSILON,
)
from app.errors import MetricError

logger = logging.getLogger(__name__)

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class PerturbationSchedule:
    fill: Sequence[float]
    polarity: str = POSITIVE
    percentages: Sequence[int] = PERTURBATION_PERCENTAGES

    def __post_init__(self):
        pct = list(self.percentages)
        if not pct or pct[0] != 0 or any(b <= a for a, b in zip(pct, pct[1:])):
            raise MetricError(f"percentages must start at 0 and increase strictly, got {pct}")
        if pct[-1] > 100:
            raise MetricError(f"percentages above 100: {pct}")
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise MetricError(f"unknown polarity {self.polarity!r}")

    @property
    def fractions(self) -> List[float]:
        return [p / 100.0 for p in self.percentages]


@dataclass(frozen=True)
class CurvePoint:
    p: float
    ppl: float
    ppl_norm: float
    entropy_norm: Optional[float] = None


@dataclass
class Curve:
    name: str
    points: List[CurvePoint]
    auc: float
    flags: List[str] = field(default_factory=list)


# --- perplexity -------------------------------------------------------------------

def perplexity_from_log_probs(log_probs: Sequence[float], flags: Optional[List[str]] = None) -> float:
    """exp of the mean negative log-likelihood; log-probs below the f64 floor are clamped and flagged"""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.size == 0:
        raise MetricError("perplexity of an empty answer")
    clamped = np.maximum(np.nan_to_num(log_probs, nan=LOG_PROB_FLOOR, neginf=LOG_PROB_FLOOR), LOG_PROB_FLOOR)
    if np.any(clamped != log_probs):
        logger.warning(f"Clamped {int(np.sum(clamped != log_probs))} log-probabilities at {LOG_PROB_FLOOR}")
        if flags is not None:
            flags.append("log_prob_clamped")
    return float(np.exp(-clamped.mean()))


def perplexity(model, image: np.ndarray, prompt: Sequence[int], answer: Sequence[int],
               flags: Optional[List[str]] = None) -> float:
    """Teacher-forced perplexity of the ground-truth answer given the image"""
    return perplexity_from_log_probs(model.answer_log_probs(image, prompt, answer), flags)


# --- pixel perturbation ----------------------------------------------------------

def upsample_heatmap(grid: np.ndarray, image_side: int) -> np.ndarray:
    """Nearest-neighbour block replication of a token grid to pixel resolution"""
    grid = np.asarray(grid, dtype=np.float64)
    gh, gw = grid.shape
    if image_side % gh or image_side % gw:
        raise MetricError(f"image side {image_side} is not divisible by grid {gh}x{gw}")
    return np.repeat(np.repeat(grid, image_side // gh, axis=0), image_side // gw, axis=1)


def _ranking(heat: np.ndarray, polarity: str) -> np.ndarray:
    """Flat pixel indices in removal order; ties keep raster order"""
    flat = heat.reshape(-1)
    key = -flat if polarity == POSITIVE else flat
    return np.argsort(key, kind="stable")


def _count(p: float, n_pixels: int) -> int:
    if not 0.0 <= p <= 1.0:
        raise MetricError(f"perturbation fraction {p} outside [0, 1]")
    return int(math.floor(p * n_pixels + 1e-9))


def perturb_image(image: np.ndarray, heat: np.ndarray, p: float, polarity: str, fill: Sequence[float]) -> np.ndarray:
    """Replace the floor(p * pixels) pixels ranked first by ``heat`` with ``fill``"""
    side = image.shape[0]
    if heat.shape != image.shape[:2]:
        raise MetricError(f"heatmap shape {heat.shape} does not match image {image.shape[:2]}")
    k = _count(p, side * side)
    out = np.array(image, dtype=np.float64)
    if k:
        flat = out.reshape(-1, out.shape[-1])
        flat[_ranking(heat, polarity)[:k]] = np.asarray(fill, dtype=np.float64)
    return out


def reveal_image(base: np.ndarray, original: np.ndarray, heat: np.ndarray, p: float) -> np.ndarray:
    """Copy the top ``p`` fraction of original pixels (by heat) onto ``base``"""
    side = base.shape[0]
    k = _count(p, side * side)
    out = np.array(base, dtype=np.float64)
    if k:
        idx = _ranking(heat, POSITIVE)[:k]
        out.reshape(-1, out.shape[-1])[idx] = np.asarray(original, dtype=np.float64).reshape(-1, out.shape[-1])[idx]
    return out


def trapezoid_auc(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) != len(ys):
        raise MetricError(f"{len(xs)} abscissae but {len(ys)} ordinates")
    if len(xs) < 2:
        return 0.0
    return float(trapezoid(np.asarray(ys, dtype=np.float64), np.asarray(xs, dtype=np.float64)))


def _normalised(ppl: float, reference: float, exp_normalization: bool) -> float:
    if exp_normalization:
        # exp(ppl) / exp(reference) without overflow
        return float(np.exp(ppl - reference))
    return ppl / reference


def _percentage_auc(schedule: PerturbationSchedule, values: Sequence[float]) -> float:
    # integer abscissae keep a constant curve's area exact
    return trapezoid_auc(list(schedule.percentages), values) / 100.0


def perturbation_curve(model, sample, heatmap: np.ndarray, schedule: PerturbationSchedule,
                       exp_normalization: bool = False, name: Optional[str] = None) -> Curve:
    """Normalised perplexity while the map's top (positive) or bottom (negative) pixels are filled"""
    flags: List[str] = []
    image = sample.image
    heat = upsample_heatmap(heatmap, image.shape[0])
    base = perplexity(model, image, sample.prompt_ids, sample.answer_ids, flags)
    points = []
    for p in schedule.fractions:
        ppl = perplexity(model, perturb_image(image, heat, p, schedule.polarity, schedule.fill),
                         sample.prompt_ids, sample.answer_ids, flags)
        points.append(CurvePoint(p, ppl, _normalised(ppl, base, exp_normalization)))
    auc = _percentage_auc(schedule, [pt.ppl_norm for pt in points])
    return Curve(name or f"perturbation_{schedule.polarity}", points, auc, sorted(set(flags)))


def deletion_curve(model, sample, heatmap: np.ndarray, schedule: PerturbationSchedule,
                   exp_normalization: bool = False) -> Curve:
    """Most important pixels replaced by the dataset mean first (higher is better)"""
    positive = PerturbationSchedule(fill=schedule.fill, polarity=POSITIVE, percentages=schedule.percentages)
    return perturbation_curve(model, sample, heatmap, positive, exp_normalization, name="deletion")


def blur_image(image: np.ndarray, sigma: Optional[float] = None) -> np.ndarray:
    """Per-channel Gaussian blur; default sigma scales the 224-px setting to the image side"""
    if sigma is None:
        sigma = INSERTION_SIGMA_AT_224 * image.shape[0] / 224.0
    return gaussian_filter(np.asarray(image, dtype=np.float64), sigma=(sigma, sigma, 0))


def insertion_curve(model, sample, heatmap: np.ndarray, schedule: PerturbationSchedule,
                    exp_normalization: bool = False, sigma: Optional[float] = None) -> Curve:
    """Start blurred, reveal the top-p original pixels; ratio against the unperturbed image (lower is better)"""
    flags: List[str] = []
    image = sample.image
    heat = upsample_heatmap(heatmap, image.shape[0])
    blurred = blur_image(image, sigma)
    base = perplexity(model, image, sample.prompt_ids, sample.answer_ids, flags)
    points = []
    for p in schedule.fractions:
        ppl = perplexity(model, reveal_image(blurred, image, heat, p), sample.prompt_ids, sample.answer_ids, flags)
        points.append(CurvePoint(p, ppl, _normalised(ppl, base, exp_normalization)))
    auc = _percentage_auc(schedule, [pt.ppl_norm for pt in points])
    return Curve("insertion", points, auc, sorted(set(flags)))


def to_bytes(image: np.ndarray) -> bytes:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).tobytes()


def compression_entropy(image: np.ndarray) -> int:
    """Deflate-compressed byte length of the row-major 8-bit image"""
    return len(zlib.compress(to_bytes(image), 9))


def pic_curve(model, sample, heatmap: np.ndarray, base_image: np.ndarray,
              percentages: Sequence[int] = tuple(PERTURBATION_PERCENTAGES) + (100,)) -> Curve:
    """Perplexity recovery against information revealed, both normalised between base and original"""
    flags: List[str] = []
    image = sample.image
    heat = upsample_heatmap(heatmap, image.shape[0])
    h_base, h_orig = compression_entropy(base_image), compression_entropy(image)
    ppl_base = perplexity(model, base_image, sample.prompt_ids, sample.answer_ids, flags)
    ppl_orig = perplexity(model, image, sample.prompt_ids, sample.answer_ids, flags)
    if h_orig == h_base or ppl_orig == ppl_base:
        logger.warning("PIC degenerate: original and base image are indistinguishable")
        return Curve("pic", [], float("nan"), sorted(set(flags + ["pic_degenerate"])))

    points = []
    for pct in percentages:
        p = pct / 100.0
        revealed = reveal_image(base_image, image, heat, p)
        h_norm = (compression_entropy(revealed) - h_base) / (h_orig - h_base)
        ppl = perplexity(model, revealed, sample.prompt_ids, sample.answer_ids, flags)
        ppl_norm = (ppl - ppl_base) / (ppl_orig - ppl_base)
        points.append(CurvePoint(p, ppl, float(np.clip(ppl_norm, 0.0, 1.0)), float(np.clip(h_norm, 0.0, 1.0))))
    ordered = sorted(points, key=lambda pt: pt.entropy_norm)
    auc = trapezoid_auc([pt.entropy_norm for pt in ordered], [pt.ppl_norm for pt in ordered])
    return Curve("pic", points, auc, sorted(set(flags)))


# --- localisation -----------------------------------------------------------------

def _pair(a: np.ndarray, m: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if a.shape != m.shape:
        raise MetricError(f"map shape {a.shape} differs from mask shape {m.shape}")
    return a, m


def _iou(pred: np.ndarray, mask: np.ndarray) -> float:
    union = np.logical_or(pred, mask).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, mask).sum() / union)


def iou_thresholds(a: np.ndarray, k: int = IOU_THRESHOLDS) -> np.ndarray:
    """k equally spaced thresholds over [min, max)"""
    lo, hi = float(a.min()), float(a.max())
    return lo + (hi - lo) * np.arange(k) / k


def iou_best_threshold(a: np.ndarray, m: np.ndarray, k: int = IOU_THRESHOLDS) -> float:
    a, m = _pair(a, m)
    mask = m > 0.5
    if not a.max() > a.min():
        # constant map: nothing exceeds the single effective threshold
        return _iou(np.zeros_like(mask), mask)
    return max(_iou(a > tau, mask) for tau in iou_thresholds(a, k))


def soft_iou(a: np.ndarray, m: np.ndarray) -> float:
    a, m = _pair(a, m)
    inter = float((a * m).sum())
    denom = float(a.sum() + m.sum()) - inter
    if denom <= 0.0:
        return 1.0
    return inter / denom


def epg(a: np.ndarray, m: np.ndarray, flags: Optional[List[str]] = None) -> float:
    """Share of attribution mass inside the mask, in percent"""
    a, m = _pair(a, m)
    total = float(a.sum())
    if total == 0.0:
        logger.warning("EPG of a map with zero total mass")
        if flags is not None:
            flags.append("epg_zero_mass")
        return 0.0
    return 100.0 * float((a * m).sum()) / total


def _snr(values: np.ndarray, inside: np.ndarray) -> float:
    n_in = float(inside.sum())
    n_out = float((1.0 - inside).sum())
    if n_in == 0.0 or n_out == 0.0:
        raise MetricError("SNR needs a mask with both inside and outside entries")
    mean_in = float((values * inside).sum()) / n_in
    mean_out = float((values * (1.0 - inside)).sum()) / n_out
    ratio = mean_in / (mean_out + SNR_EPSILON)
    return 10.0 * math.log10(max(ratio, SNR_EPSILON))


def snr_db(e: np.ndarray, m: np.ndarray) -> float:
    e, m = _pair(e, m)
    return _snr(e, (m > 0.5).astype(np.float64))


def mse_metric(e: np.ndarray, m: np.ndarray) -> float:
    e, m = _pair(e, m)
    return float(np.mean((e - m) ** 2))


def filler_snr(weights: Sequence[float], filler_mask: Sequence[int]) -> float:
    """SNR over answer tokens: content tokens inside, filler tokens outside"""
    weights = np.asarray(weights, dtype=np.float64)
    mask = np.asarray(filler_mask, dtype=np.float64)
    if weights.shape != mask.shape:
        raise MetricError(f"{weights.size} token weights but filler mask of length {mask.size}")
    return _snr(weights, mask)


def token_energy(amap) -> np.ndarray:
    """Mass each generated token contributes to the sequence map"""
    return np.array([w * float(g.sum()) for w, g in zip(amap.sequence_weights, amap.per_token_grid)])
