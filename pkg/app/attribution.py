# app/attribution.py

"""
Attribution maps over the visual token grid of a completed GenerationTrace.

DEX-AR reads, for every generated token and layer, the last query row of the
gradient of the layer's logit-lens value with respect to the attention
probabilities. Heads whose visual gradients do not dominate their text
gradients are dropped, and whole tokens are weighted by the same test taken
over all layers and heads so that filler words fade out of the sequence map.

The baselines (raw attention, rollout, GradCAM, CheferCAM, Attn x Grad) share
the same per-token / sequence structure so every method can be scored the same
way.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import aiofiles
import numpy as np

from app import tensorcore as tc
from app.errors import AttributionError, UnsupportedArchitectureError
from app.models import Architecture, AttributionConfig, HeadScoring
from app.toyvlm import GenerationTrace, TokenLayout, ToyVLM

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeadScore:
    layer: int
    step: int
    head: int
    s_img: float
    s_text: float
    w: float


@dataclass
class AttributionMap:
    method: str
    tokens: List[int]
    per_token_raw: List[np.ndarray]    # [N] each
    per_token_grid: List[np.ndarray]   # [grid_h, grid_w] each, in [0, 1]
    token_weights: np.ndarray          # [T], nonnegative
    sequence_weights: np.ndarray       # [T], weights actually applied in the sequence sum
    sequence_raw: np.ndarray           # [N]
    sequence_grid: np.ndarray          # [grid_h, grid_w]
    config: Optional[AttributionConfig] = None
    head_scores: List[HeadScore] = field(default_factory=list)


@dataclass
class StepGradients:
    step: int
    layout: TokenLayout
    attention: Dict[int, List[np.ndarray]]  # root layer -> d lens / d A for every layer
    hidden: Dict[int, List[np.ndarray]]     # root layer -> d lens / d prefix stream entering every layer


class GradientBank:
    """Per-trace cache of attention and hidden-state gradients.

    One step graph is built per generation step and swept once per logit-lens
    root, then discarded.
    """

    def __init__(self, model: ToyVLM, trace: GenerationTrace):
        if not trace.complete:
            raise AttributionError("attribution needs a completed trace")
        if not trace.steps:
            raise AttributionError("trace has no generated tokens")
        self.model = model
        self.trace = trace
        self._steps: Dict[int, StepGradients] = {}

    @property
    def n_layers(self) -> int:
        return self.model.config.layers

    def step(self, t: int) -> StepGradients:
        if t not in self._steps:
            graph = self.model.step_graph(self.trace, t)
            attention, hidden = {}, {}
            for root_layer, root in enumerate(graph.lens, start=1):
                tc.reverse_sweep(graph.graph, root)
                if any(a.grad is None for a in graph.attention):
                    raise AttributionError(f"step {t}: attention nodes were not retained")
                attention[root_layer] = [a.grad for a in graph.attention]
                hidden[root_layer] = [h.grad for h in graph.hidden]
            self._steps[t] = StepGradients(t, graph.layout, attention, hidden)
        return self._steps[t]

    def attention_grad(self, root_layer: int, layer: int, t: int) -> np.ndarray:
        self._check_layer(root_layer)
        self._check_layer(layer)
        return self.step(t).attention[root_layer][layer - 1]

    def hidden_grad(self, root_layer: int, layer: int, t: int) -> np.ndarray:
        self._check_layer(root_layer)
        self._check_layer(layer)
        return self.step(t).hidden[root_layer][layer - 1]

    def _check_layer(self, layer: int) -> None:
        if not 1 <= layer <= self.n_layers:
            raise AttributionError(f"layer {layer} outside 1..{self.n_layers}")


def normalize_map(x: np.ndarray) -> np.ndarray:
    """Min-max normalise to [0, 1]; constant maps become all zeros"""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if not hi > lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _grid(model: ToyVLM, raw: np.ndarray) -> np.ndarray:
    cfg = model.config
    return normalize_map(np.asarray(raw).reshape(cfg.grid_h, cfg.grid_w))


# --- DEX-AR -------------------------------------------------------------------

def grad_wrt_attention(bank: GradientBank, layer: int, step: int) -> np.ndarray:
    """Last query row of d(lens logit at ``layer``)/d(A at ``layer``): [h, keys]"""
    return bank.attention_grad(layer, layer, step)[:, -1, :]


def split_visual_text(grad_row: np.ndarray, layout: TokenLayout) -> Tuple[np.ndarray, np.ndarray]:
    if grad_row.shape[-1] != layout.key_length:
        raise AttributionError(f"gradient row has {grad_row.shape[-1]} columns, layout expects {layout.key_length}")
    if layout.key_length <= layout.n_visual:
        raise AttributionError("layout has no text columns")
    return grad_row[:, :layout.n_visual], grad_row[:, layout.n_visual:]


def _score(x: np.ndarray, mode: HeadScoring, fraction: float) -> np.ndarray:
    if mode == HeadScoring.MAX:
        return x.max(axis=1)
    if mode == HeadScoring.AVG:
        return x.mean(axis=1)
    k = max(1, math.ceil(fraction * x.shape[1] - 1e-9))
    return np.sort(x, axis=1)[:, -k:].mean(axis=1)


def head_scores(grad_v: np.ndarray, grad_text: np.ndarray, mode: HeadScoring = HeadScoring.MAX,
                fraction: float = 0.1, layer: int = 0, step: int = 0) -> List[HeadScore]:
    """S_img / S_text per head and the gate w = ReLU(S_img - S_text)"""
    mode = HeadScoring(mode)
    if mode == HeadScoring.TOPK and not 0.0 < fraction <= 1.0:
        raise AttributionError(f"top-k fraction must be in (0, 1], got {fraction}")
    s_img, s_text = _score(grad_v, mode, fraction), _score(grad_text, mode, fraction)
    return [HeadScore(layer, step, i, float(a), float(b), max(float(a) - float(b), 0.0))
            for i, (a, b) in enumerate(zip(s_img, s_text))]


def _step_gradients(bank: GradientBank, layer: int, step: int, config: AttributionConfig):
    grad_v, grad_text = split_visual_text(grad_wrt_attention(bank, layer, step), bank.step(step).layout)
    if config.relu_on_grad:
        grad_v, grad_text = np.maximum(grad_v, 0.0), np.maximum(grad_text, 0.0)
    return grad_v, grad_text


def _resolve_layers(bank: GradientBank, config: AttributionConfig) -> List[int]:
    layers = config.resolve_layers(bank.n_layers)
    if not layers:
        raise AttributionError("layers_used is empty")
    if max(layers) > bank.n_layers:
        raise AttributionError(f"layers_used {layers} exceeds model depth {bank.n_layers}")
    return layers


def dexar_token_map(bank: GradientBank, step: int, config: AttributionConfig) -> Tuple[np.ndarray, np.ndarray, List[HeadScore]]:
    """Raw visual map of one generated token, its normalised grid and the head scores used"""
    raw = np.zeros(bank.model.config.n_visual)
    scores: List[HeadScore] = []
    for layer in _resolve_layers(bank, config):
        grad_v, grad_text = _step_gradients(bank, layer, step, config)
        if config.score_magnitude:
            layer_scores = head_scores(np.abs(grad_v), np.abs(grad_text), config.head_scoring_mode,
                                       config.topk_fraction, layer, step)
        else:
            layer_scores = head_scores(grad_v, grad_text, config.head_scoring_mode, config.topk_fraction, layer, step)
        scores.extend(layer_scores)
        if config.head_filtering:
            w = np.array([s.w for s in layer_scores])
        else:
            w = np.ones(len(layer_scores))
        raw = raw + (w[:, None] * grad_v).sum(axis=0)
    return raw, _grid(bank.model, raw), scores


def token_weight(bank: GradientBank, step: int, config: AttributionConfig) -> float:
    """delta = ReLU(max over every layer and head of S_img - the same max of S_text), always in max mode

    ``layers_used`` only selects the layers of the per-token maps; delta always spans the whole model.
    """
    best_img, best_text = -np.inf, -np.inf
    for layer in range(1, bank.n_layers + 1):
        grad_v, grad_text = _step_gradients(bank, layer, step, config)
        if config.score_magnitude:
            grad_v, grad_text = np.abs(grad_v), np.abs(grad_text)
        best_img = max(best_img, float(grad_v.max()))
        best_text = max(best_text, float(grad_text.max()))
    return max(best_img - best_text, 0.0)


def dexar_sequence_map(maps: Sequence[np.ndarray], weights: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Weighted sum of per-token maps, then normalised; maps are [grid_h, grid_w]"""
    if len(maps) == 0:
        raise AttributionError("sequence map needs at least one generated token")
    if len(maps) != len(weights):
        raise AttributionError(f"{len(maps)} token maps but {len(weights)} weights")
    total = np.zeros_like(np.asarray(maps[0], dtype=np.float64))
    for grid, delta in zip(maps, weights):
        total = total + float(delta) * np.asarray(grid, dtype=np.float64)
    return total.reshape(-1), normalize_map(total)


def dexar(model: ToyVLM, trace: GenerationTrace, config: Optional[AttributionConfig] = None,
          bank: Optional[GradientBank] = None) -> AttributionMap:
    config = config or AttributionConfig()
    bank = bank or GradientBank(model, trace)
    raws, grids, deltas, scores = [], [], [], []
    for t in range(1, trace.n_steps + 1):
        raw, grid, step_scores = dexar_token_map(bank, t, config)
        raws.append(raw)
        grids.append(grid)
        scores.extend(step_scores)
        deltas.append(token_weight(bank, t, config))
    weights = deltas if config.filler_filtering else [1.0] * len(deltas)
    cfg = model.config
    sources = [r.reshape(cfg.grid_h, cfg.grid_w) for r in raws] if config.aggregate_raw else grids
    seq_raw, seq_grid = dexar_sequence_map(sources, weights)
    return AttributionMap("dexar", trace.tokens, raws, grids, np.array(deltas), np.array(weights), seq_raw, seq_grid,
                          config=config, head_scores=scores)


# --- baselines -----------------------------------------------------------------

def _assemble(method: str, model: ToyVLM, trace: GenerationTrace, raws: List[np.ndarray]) -> AttributionMap:
    """Baselines weight every token equally"""
    grids = [_grid(model, r) for r in raws]
    seq_raw = np.sum(raws, axis=0)
    ones = np.ones(len(raws))
    return AttributionMap(method, trace.tokens, raws, grids, ones, ones, seq_raw, _grid(model, seq_raw))


def _require_steps(trace: GenerationTrace) -> None:
    if not trace.steps:
        raise AttributionError("trace has no generated tokens")


def baseline_raw_attention(model: ToyVLM, trace: GenerationTrace) -> AttributionMap:
    """Head-averaged last-row attention on visual columns, summed over layers"""
    _require_steps(trace)
    n = model.config.n_visual
    raws = []
    for record in trace.steps:
        raw = np.zeros(n)
        for attn in record.attention:
            raw = raw + attn[:, -1, :n].mean(axis=0)
        raws.append(raw)
    return _assemble("raw_attention", model, trace, raws)


def rollout_matrices(attention: Sequence[np.ndarray]) -> Tuple[List[np.ndarray], np.ndarray]:
    """Row-normalised (mean_heads A + I) per layer and their product from layer 1 upwards"""
    size = attention[0].shape[-1]
    eye = np.eye(size)
    hats = []
    joint = eye
    for attn in attention:
        if attn.shape[-2] != attn.shape[-1]:
            raise UnsupportedArchitectureError("rollout needs square self-attention maps")
        a_bar = attn.mean(axis=0) + eye
        a_hat = a_bar / a_bar.sum(axis=-1, keepdims=True)
        hats.append(a_hat)
        joint = a_hat @ joint
    return hats, joint


def rollout_contribution(attention: Sequence[np.ndarray], n_visual: int) -> np.ndarray:
    _, joint = rollout_matrices(attention)
    return joint[-1, :n_visual]


def baseline_rollout(model: ToyVLM, trace: GenerationTrace) -> AttributionMap:
    if trace.arch == Architecture.ENCODER_DECODER:
        raise UnsupportedArchitectureError("rollout is not defined for encoder_decoder models")
    _require_steps(trace)
    raws = [rollout_contribution(record.attention, model.config.n_visual) for record in trace.steps]
    return _assemble("rollout", model, trace, raws)


def baseline_gradcam(model: ToyVLM, trace: GenerationTrace, layer: Optional[int] = None,
                     bank: Optional[GradientBank] = None) -> AttributionMap:
    """ReLU(dfinal/dZ * Z) summed over features, Z the visual stream entering ``layer``"""
    cfg = model.config
    layer = cfg.layers if layer is None else layer
    if not 1 <= layer <= cfg.layers:
        raise AttributionError(f"gradcam layer {layer} outside 1..{cfg.layers}")
    bank = bank or GradientBank(model, trace)
    n = cfg.n_visual
    raws = []
    for t, record in enumerate(trace.steps, start=1):
        z = record.prefix_hidden[layer - 1][:n]
        g = bank.hidden_grad(cfg.layers, layer, t)[:n]
        raws.append(np.maximum(g * z, 0.0).sum(axis=1))
    return _assemble("gradcam", model, trace, raws)


def chefercam_contribution(attention: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                           n_visual: int, cross: bool = False) -> np.ndarray:
    """Relevance of the last query row on visual columns after propagating through every layer"""
    if cross:
        relevance = np.zeros(attention[0].shape[-2:])
        for attn, grad in zip(attention, grads):
            relevance = relevance + np.maximum((attn * grad).sum(axis=0), 0.0)
        return relevance[-1, :n_visual]
    relevance = np.eye(attention[0].shape[-1])
    for attn, grad in zip(attention, grads):
        cam = np.maximum((attn * grad).sum(axis=0), 0.0)
        relevance = relevance + cam @ relevance
    return relevance[-1, :n_visual]


def baseline_chefercam(model: ToyVLM, trace: GenerationTrace, bank: Optional[GradientBank] = None) -> AttributionMap:
    bank = bank or GradientBank(model, trace)
    L = model.config.layers
    raws = []
    for t, record in enumerate(trace.steps, start=1):
        grads = [bank.attention_grad(L, l, t) for l in range(1, L + 1)]
        raws.append(chefercam_contribution(record.attention, grads, model.config.n_visual, cross=model.cross))
    return _assemble("chefercam", model, trace, raws)


def baseline_attn_x_grad(model: ToyVLM, trace: GenerationTrace, bank: Optional[GradientBank] = None) -> AttributionMap:
    """ReLU of head-summed A * dA on the last row, per layer with that layer's lens logit"""
    bank = bank or GradientBank(model, trace)
    n = model.config.n_visual
    raws = []
    for t, record in enumerate(trace.steps, start=1):
        raw = np.zeros(n)
        for l, attn in enumerate(record.attention, start=1):
            grad = grad_wrt_attention(bank, l, t)
            raw = raw + np.maximum((attn[:, -1, :n] * grad[:, :n]).sum(axis=0), 0.0)
        raws.append(raw)
    return _assemble("attn_x_grad", model, trace, raws)


MethodFn = Callable[[ToyVLM, GenerationTrace, AttributionConfig, GradientBank], AttributionMap]

METHODS: Dict[str, MethodFn] = {
    "dexar": lambda m, tr, cfg, bank: dexar(m, tr, cfg, bank),
    "raw_attention": lambda m, tr, cfg, bank: baseline_raw_attention(m, tr),
    "rollout": lambda m, tr, cfg, bank: baseline_rollout(m, tr),
    "gradcam": lambda m, tr, cfg, bank: baseline_gradcam(m, tr, cfg.gradcam_layer, bank),
    "chefercam": lambda m, tr, cfg, bank: baseline_chefercam(m, tr, bank),
    "attn_x_grad": lambda m, tr, cfg, bank: baseline_attn_x_grad(m, tr, bank),
}


def explain(method: str, model: ToyVLM, trace: GenerationTrace, config: Optional[AttributionConfig] = None,
            bank: Optional[GradientBank] = None) -> AttributionMap:
    if method not in METHODS:
        raise AttributionError(f"unknown attribution method {method!r}")
    config = config or AttributionConfig()
    if bank is None and method not in ("raw_attention", "rollout"):
        bank = GradientBank(model, trace)
    return METHODS[method](model, trace, config, bank)


# --- dump ----------------------------------------------------------------------

async def write_attribution_dump(amap: AttributionMap, directory: str, token_strings: Sequence[str]) -> None:
    """manifest.json plus one little-endian f64 blob per token grid and one for the sequence grid"""
    os.makedirs(directory, exist_ok=True)
    blobs = []
    for t, grid in enumerate(amap.per_token_grid, start=1):
        name = f"token_{t:03d}.f64"
        blobs.append(name)
        async with aiofiles.open(os.path.join(directory, name), "wb") as f:
            await f.write(np.ascontiguousarray(grid, dtype="<f8").tobytes())
    async with aiofiles.open(os.path.join(directory, "sequence.f64"), "wb") as f:
        await f.write(np.ascontiguousarray(amap.sequence_grid, dtype="<f8").tobytes())

    manifest = {
        "method": amap.method,
        "config": amap.config.model_dump(mode="json") if amap.config is not None else None,
        "tokens": list(token_strings),
        "token_weights": [float(d) for d in amap.token_weights],
        "grid_shape": list(amap.sequence_grid.shape),
        "token_grids": blobs,
        "sequence_grid": "sequence.f64",
    }
    async with aiofiles.open(os.path.join(directory, "manifest.json"), "w") as f:
        await f.write(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info(f"Wrote {amap.method} attribution for {len(amap.tokens)} tokens to {directory}")
