# app/toyvlm.py

"""
Toy autoregressive vision-language model.

Patch-embedded visual tokens are followed by prompt tokens and the answer
generated so far. Three layouts are supported:

* decoder_only: causal attention over the whole sequence
* prefix_lm: bidirectional inside the visual+prompt prefix, causal among answers
* encoder_decoder: the prefix is encoded separately and the answer decoder
  reads it through cross-attention

The prefix and the answer are computed as two streams. Prefix rows never read
answer columns, so their values do not depend on how many answer tokens exist
and are bit-identical at every generation step without a KV cache.
"""

import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import aiofiles
import numpy as np
from pydantic import ValidationError
from scipy.special import log_softmax

from app import tensorcore as tc
from app.config import (
    ADAM_BETAS,
    ADAM_EPS,
    ADAM_LR,
    BOS_TOKEN_ID,
    EOS_TOKEN_ID,
    INIT_STD,
    LAYER_NORM_EPS,
    MLP_RATIO,
)
from app.errors import ModelError, TrainingError
from app.models import Architecture, CheckpointHeader, ModelConfig, ParameterEntry, TrainingRecord, TrainingSpec

logger = logging.getLogger(__name__)

# ("attention", l) or ("hidden", l) -> additive perturbation, layers numbered from 1
Deltas = Dict[Tuple[str, int], np.ndarray]


@dataclass(frozen=True)
class TokenLayout:
    n_visual: int
    n_context: int
    n_answer: int
    cross: bool = False

    @property
    def n_prefix(self) -> int:
        return self.n_visual + self.n_context

    @property
    def total(self) -> int:
        return self.n_prefix + self.n_answer

    @property
    def query_length(self) -> int:
        return self.n_answer if self.cross else self.total

    @property
    def key_length(self) -> int:
        return self.n_prefix if self.cross else self.total


@dataclass(frozen=True)
class StepRecord:
    """Everything the forward pass produced while predicting one answer token"""
    step: int
    layout: TokenLayout
    attention: Tuple[np.ndarray, ...]      # per layer [h, queries, keys]; cross-attention for encoder_decoder
    hidden: Tuple[np.ndarray, ...]         # index 0 is the embedding, index l the output of layer l
    prefix_hidden: Tuple[np.ndarray, ...]  # prefix (encoder) stream, same indexing
    lens_logits: np.ndarray                # [L, V] logit lens at the last position
    logits: np.ndarray                     # [V]
    token: int


@dataclass
class GenerationTrace:
    image: np.ndarray
    prompt: Tuple[int, ...]
    arch: Architecture
    steps: List[StepRecord] = field(default_factory=list)
    forced: bool = False
    complete: bool = False

    @property
    def tokens(self) -> List[int]:
        return [record.token for record in self.steps]

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def step(self, t: int) -> StepRecord:
        if not 1 <= t <= len(self.steps):
            raise ModelError(f"step {t} outside generated range 1..{len(self.steps)}")
        return self.steps[t - 1]

    def append(self, record: StepRecord) -> None:
        if self.complete:
            raise ModelError("trace is complete and can no longer be extended")
        self.steps.append(record)


@dataclass
class StepGraph:
    """Recorded forward pass of one step, ready for reverse sweeps"""
    step: int
    token: int
    layout: TokenLayout
    graph: tc.ComputeGraph
    attention: List[tc.DiffTensor]  # retained, one per layer
    hidden: List[tc.DiffTensor]     # retained prefix stream entering each layer
    lens: List[tc.DiffTensor]       # scalar logit-lens value of the token, one per layer


@dataclass
class _Forward:
    layout: TokenLayout
    params: Dict[str, tc.DiffTensor]
    attention: List[tc.DiffTensor]
    prefix: List[tc.DiffTensor]
    answer: List[tc.DiffTensor]


class Example(Protocol):
    image: np.ndarray
    prompt_ids: List[int]
    answer_ids: List[int]


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """[side, side, C] image -> [N, patch*patch*C] rows in raster order of patches"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != image.shape[1]:
        raise ModelError(f"expected a square [side, side, channels] image, got shape {image.shape}")
    side, _, channels = image.shape
    if side % patch_size:
        raise ModelError(f"image side {side} is not divisible by patch size {patch_size}")
    g = side // patch_size
    patches = image.reshape(g, patch_size, g, patch_size, channels).transpose(0, 2, 1, 3, 4)
    return patches.reshape(g * g, patch_size * patch_size * channels)


def init_params(config: ModelConfig) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    d, hidden = config.width, config.width * MLP_RATIO
    cross = config.arch == Architecture.ENCODER_DECODER

    def normal(*shape):
        return rng.normal(0.0, INIT_STD, size=shape)

    params: Dict[str, np.ndarray] = {
        "patch.w": normal(config.patch_size * config.patch_size * config.channels, d),
        "patch.b": np.zeros(d),
        "tok_emb": normal(config.vocab_size, d),
        "pos_emb": normal(config.max_seq_len, d),
    }
    if cross:
        params["dec_pos"] = normal(config.max_seq_len, d)

    def block(name: str, with_cross: bool):
        params[f"{name}.ln1.g"] = np.ones(d)
        params[f"{name}.ln1.b"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            params[f"{name}.attn.{w}"] = normal(d, d)
        if with_cross:
            params[f"{name}.lnc.g"] = np.ones(d)
            params[f"{name}.lnc.b"] = np.zeros(d)
            for w in ("wq", "wk", "wv", "wo"):
                params[f"{name}.cross.{w}"] = normal(d, d)
        params[f"{name}.ln2.g"] = np.ones(d)
        params[f"{name}.ln2.b"] = np.zeros(d)
        params[f"{name}.mlp.w1"] = normal(d, hidden)
        params[f"{name}.mlp.b1"] = np.zeros(hidden)
        params[f"{name}.mlp.w2"] = normal(hidden, d)
        params[f"{name}.mlp.b2"] = np.zeros(d)

    if cross:
        for l in range(1, config.layers + 1):
            block(f"encoder.{l}", with_cross=False)
        params["encoder.ln_f.g"] = np.ones(d)
        params["encoder.ln_f.b"] = np.zeros(d)
    for l in range(1, config.layers + 1):
        block(f"blocks.{l}", with_cross=cross)
    params["ln_f.g"] = np.ones(d)
    params["ln_f.b"] = np.zeros(d)
    params["head"] = normal(d, config.vocab_size)
    return params


def _answer_mask(n_prefix: int, n_answer: int) -> np.ndarray:
    mask = np.ones((n_answer, n_prefix + n_answer), dtype=bool)
    mask[:, n_prefix:] = np.tril(np.ones((n_answer, n_answer), dtype=bool))
    return mask


class ToyVLM:
    """Small VLM over a word-level vocabulary; parameters live in ``self.params``"""

    def __init__(self, config: ModelConfig, params: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        reference = init_params(config)
        if params is None:
            self.params = reference
            return
        for name, value in reference.items():
            if name not in params or tuple(params[name].shape) != value.shape:
                raise ModelError(f"parameter {name} missing or mis-shaped for this config")
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in reference}

    @property
    def cross(self) -> bool:
        return self.config.arch == Architecture.ENCODER_DECODER

    @property
    def layers(self) -> int:
        return self.config.layers

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # --- forward --------------------------------------------------------------

    def _bind(self, graph: tc.ComputeGraph, trainable: bool) -> Dict[str, tc.DiffTensor]:
        return {name: graph.leaf(value, requires_grad=trainable, copy=False)
                for name, value in self.params.items()}

    def _check_ids(self, ids: Sequence[int], what: str) -> None:
        for token in ids:
            if not 0 <= int(token) < self.config.vocab_size:
                raise ModelError(f"{what} token {token} outside vocabulary of size {self.config.vocab_size}")

    def _encode(self, graph: tc.ComputeGraph, p: Dict[str, tc.DiffTensor], image: np.ndarray) -> tc.DiffTensor:
        cfg = self.config
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (cfg.image_side, cfg.image_side, cfg.channels):
            raise ModelError(f"image shape {image.shape} does not match "
                             f"({cfg.image_side}, {cfg.image_side}, {cfg.channels})")
        patches = graph.constant(patchify(image, cfg.patch_size))
        return tc.add(tc.matmul(patches, p["patch.w"]), p["patch.b"])

    def encode_image(self, image: np.ndarray) -> tc.DiffTensor:
        """Linear patch embedding, one token per patch in raster order"""
        graph = tc.ComputeGraph(record=False)
        return self._encode(graph, self._bind(graph, trainable=False), image)

    def _heads(self, x: tc.DiffTensor) -> tc.DiffTensor:
        n = x.shape[0]
        return tc.transpose(tc.reshape(x, (n, self.config.heads, self.config.head_dim)), (1, 0, 2))

    def _merge(self, x: tc.DiffTensor) -> tc.DiffTensor:
        n = x.shape[1]
        return tc.reshape(tc.transpose(x, (1, 0, 2)), (n, self.config.width))

    def _scores(self, q: tc.DiffTensor, k: tc.DiffTensor) -> tc.DiffTensor:
        return tc.scale(tc.matmul(q, tc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.config.head_dim))

    @staticmethod
    def _hook(x: tc.DiffTensor, retain: bool, delta: Optional[np.ndarray]) -> tc.DiffTensor:
        if delta is not None:
            x = tc.add(x, x.graph.constant(delta))
        return tc.retain(x) if retain else x

    def _norm(self, p, name: str, x: tc.DiffTensor) -> tc.DiffTensor:
        return tc.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"], LAYER_NORM_EPS)

    def _mlp(self, p, name: str, x: tc.DiffTensor) -> tc.DiffTensor:
        h = self._norm(p, f"{name}.ln2", x)
        h = tc.gelu(tc.add(tc.matmul(h, p[f"{name}.mlp.w1"]), p[f"{name}.mlp.b1"]))
        return tc.add(x, tc.add(tc.matmul(h, p[f"{name}.mlp.w2"]), p[f"{name}.mlp.b2"]))

    def _self_attention(self, p, name: str, x: tc.DiffTensor, mask: Optional[np.ndarray]) -> tc.DiffTensor:
        h = self._norm(p, f"{name}.ln1", x)
        q, k, v = (self._heads(tc.matmul(h, p[f"{name}.attn.{w}"])) for w in ("wq", "wk", "wv"))
        attn = tc.softmax_rows(self._scores(q, k), mask)
        return tc.add(x, tc.matmul(self._merge(tc.matmul(attn, v)), p[f"{name}.attn.wo"]))

    def _joint_block(self, p, name: str, xp, xa, prefix_mask, retain: bool, delta):
        """One layer over the prefix and answer streams; returns both streams and A"""
        graph = xp.graph
        hp, ha = self._norm(p, f"{name}.ln1", xp), self._norm(p, f"{name}.ln1", xa)
        qp, kp, vp = (self._heads(tc.matmul(hp, p[f"{name}.attn.{w}"])) for w in ("wq", "wk", "wv"))
        qa, ka, va = (self._heads(tc.matmul(ha, p[f"{name}.attn.{w}"])) for w in ("wq", "wk", "wv"))
        n_p, n_a = xp.shape[0], xa.shape[0]

        ap = tc.softmax_rows(self._scores(qp, kp), prefix_mask)
        k_all, v_all = tc.concat([kp, ka], axis=1), tc.concat([vp, va], axis=1)
        aa = tc.softmax_rows(self._scores(qa, k_all), _answer_mask(n_p, n_a))
        pad = graph.constant(np.zeros((self.config.heads, n_p, n_a)))
        attn = self._hook(tc.concat([tc.concat([ap, pad], axis=2), aa], axis=1), retain, delta)

        op = tc.matmul(tc.take(attn, (slice(None), slice(0, n_p), slice(0, n_p))), vp)
        oa = tc.matmul(tc.take(attn, (slice(None), slice(n_p, None), slice(None))), v_all)
        wo = p[f"{name}.attn.wo"]
        xp = tc.add(xp, tc.matmul(self._merge(op), wo))
        xa = tc.add(xa, tc.matmul(self._merge(oa), wo))
        return self._mlp(p, name, xp), self._mlp(p, name, xa), attn

    def _decoder_block(self, p, name: str, xa, memory, retain: bool, delta):
        n_a = xa.shape[0]
        xa = self._self_attention(p, name, xa, np.tril(np.ones((n_a, n_a), dtype=bool)))
        h = self._norm(p, f"{name}.lnc", xa)
        q = self._heads(tc.matmul(h, p[f"{name}.cross.wq"]))
        k = self._heads(tc.matmul(memory, p[f"{name}.cross.wk"]))
        v = self._heads(tc.matmul(memory, p[f"{name}.cross.wv"]))
        attn = self._hook(tc.softmax_rows(self._scores(q, k)), retain, delta)
        xa = tc.add(xa, tc.matmul(self._merge(tc.matmul(attn, v)), p[f"{name}.cross.wo"]))
        return self._mlp(p, name, xa), attn

    def _forward(self, graph: tc.ComputeGraph, image, prompt: Sequence[int], inputs: Sequence[int],
                 trainable: bool = False, retain: bool = False, deltas: Optional[Deltas] = None) -> _Forward:
        cfg = self.config
        deltas = deltas or {}
        if image is None:
            raise ModelError("visual tokens are mandatory: no image given")
        if len(prompt) == 0:
            raise ModelError("prompt must contain at least one token")
        self._check_ids(prompt, "prompt")
        self._check_ids(inputs, "answer")
        layout = TokenLayout(cfg.n_visual, len(prompt), len(inputs), cross=self.cross)
        too_long = (max(layout.n_prefix, layout.n_answer) if self.cross else layout.total) > cfg.max_seq_len
        if too_long:
            raise ModelError(f"sequence of {layout.total} tokens exceeds max_seq_len {cfg.max_seq_len}")

        p = self._bind(graph, trainable)
        n_p, n_a = layout.n_prefix, layout.n_answer
        xp = tc.concat([self._encode(graph, p, image), tc.embedding(p["tok_emb"], list(prompt))])
        xp = tc.add(xp, tc.take(p["pos_emb"], (slice(0, n_p),)))
        positions = (p["dec_pos"], slice(0, n_a)) if self.cross else (p["pos_emb"], slice(n_p, n_p + n_a))
        xa = tc.add(tc.embedding(p["tok_emb"], list(inputs)), tc.take(positions[0], (positions[1],)))

        prefix, answer, attention = [], [], []
        if self.cross:
            for l in range(1, cfg.layers + 1):
                xp = self._hook(xp, retain, deltas.get(("hidden", l)))
                prefix.append(xp)
                xp = self._self_attention(p, f"encoder.{l}", xp, None)
                xp = self._mlp(p, f"encoder.{l}", xp)
            prefix.append(xp)
            memory = self._norm(p, "encoder.ln_f", xp)
            for l in range(1, cfg.layers + 1):
                answer.append(xa)
                xa, attn = self._decoder_block(p, f"blocks.{l}", xa, memory, retain, deltas.get(("attention", l)))
                attention.append(attn)
            answer.append(xa)
        else:
            prefix_mask = np.tril(np.ones((n_p, n_p), dtype=bool)) if cfg.arch == Architecture.DECODER_ONLY else None
            for l in range(1, cfg.layers + 1):
                xp = self._hook(xp, retain, deltas.get(("hidden", l)))
                prefix.append(xp)
                answer.append(xa)
                xp, xa, attn = self._joint_block(p, f"blocks.{l}", xp, xa, prefix_mask, retain,
                                                 deltas.get(("attention", l)))
                attention.append(attn)
            prefix.append(xp)
            answer.append(xa)
        return _Forward(layout, p, attention, prefix, answer)

    def _lens(self, fwd: _Forward, layer: int) -> tc.DiffTensor:
        """Logit-lens vector [V] read from the last answer position after ``layer``"""
        x = fwd.answer[layer]
        row = tc.take(x, (slice(x.shape[0] - 1, x.shape[0]),))
        if layer == self.config.layers or self.config.lens_normalize:
            row = self._norm(fwd.params, "ln_f", row)
        return tc.reshape(tc.matmul(row, fwd.params["head"]), (self.config.vocab_size,))

    def _final_logits(self, fwd: _Forward) -> tc.DiffTensor:
        return tc.matmul(self._norm(fwd.params, "ln_f", fwd.answer[-1]), fwd.params["head"])

    # --- generation -------------------------------------------------------------

    def new_trace(self, image: np.ndarray, prompt: Sequence[int]) -> GenerationTrace:
        if image is None:
            raise ModelError("visual tokens are mandatory: no image given")
        if len(prompt) == 0:
            raise ModelError("prompt must contain at least one token")
        return GenerationTrace(image=np.array(image, dtype=np.float64), prompt=tuple(int(t) for t in prompt),
                               arch=self.config.arch)

    def forward_step(self, trace: GenerationTrace, token: Optional[int] = None) -> np.ndarray:
        """Predict the next answer token, append its StepRecord and return the final logits.

        ``token`` forces the recorded token (teacher forcing); otherwise greedy argmax.
        """
        if trace.complete:
            raise ModelError("trace is complete and can no longer be extended")
        graph = tc.ComputeGraph(record=False)
        fwd = self._forward(graph, trace.image, trace.prompt, [BOS_TOKEN_ID] + trace.tokens)
        lens = np.stack([self._lens(fwd, l).values for l in range(1, self.config.layers + 1)])
        logits = lens[-1].copy()
        chosen = int(np.argmax(logits)) if token is None else int(token)
        if not 0 <= chosen < self.config.vocab_size:
            raise ModelError(f"forced token {chosen} outside vocabulary")
        if fwd.layout.cross:
            hidden = tuple(x.values for x in fwd.answer)
        else:
            hidden = tuple(np.concatenate([xp.values, xa.values]) for xp, xa in zip(fwd.prefix, fwd.answer))
        trace.append(StepRecord(
            step=trace.n_steps + 1,
            layout=fwd.layout,
            attention=tuple(a.values for a in fwd.attention),
            hidden=hidden,
            prefix_hidden=tuple(x.values for x in fwd.prefix),
            lens_logits=lens,
            logits=logits,
            token=chosen,
        ))
        return logits

    def generate(self, image: np.ndarray, prompt: Sequence[int], max_len: Optional[int] = None) -> GenerationTrace:
        """Greedy decoding until the end token or ``max_len`` tokens"""
        max_len = self.config.max_answer_len if max_len is None else max_len
        if max_len < 1:
            raise ModelError(f"max_len must be at least 1, got {max_len}")
        trace = self.new_trace(image, prompt)
        for _ in range(max_len):
            self.forward_step(trace)
            if trace.tokens[-1] == EOS_TOKEN_ID:
                break
        trace.complete = True
        return trace

    def teacher_force(self, image: np.ndarray, prompt: Sequence[int], answer: Sequence[int]) -> GenerationTrace:
        """Trace whose recorded tokens are the given answer instead of the model's choices"""
        if len(answer) == 0:
            raise ModelError("teacher forcing needs a nonempty answer")
        trace = self.new_trace(image, prompt)
        for token in answer:
            self.forward_step(trace, int(token))
        trace.forced = True
        trace.complete = True
        return trace

    def logit_lens(self, trace: GenerationTrace, layer: int, step: int) -> float:
        if not 1 <= layer <= self.config.layers:
            raise ModelError(f"layer {layer} outside 1..{self.config.layers}")
        record = trace.step(step)
        return float(record.lens_logits[layer - 1, record.token])

    def step_graph(self, trace: GenerationTrace, step: int, deltas: Optional[Deltas] = None) -> StepGraph:
        """Re-run step ``step`` on a recording graph with attention and hidden states retained"""
        record = trace.step(step)
        graph = tc.ComputeGraph(record=True)
        fwd = self._forward(graph, trace.image, trace.prompt, [BOS_TOKEN_ID] + trace.tokens[:step - 1],
                            retain=True, deltas=deltas)
        lens = [tc.pick(self._lens(fwd, l), (record.token,)) for l in range(1, self.config.layers + 1)]
        return StepGraph(step=step, token=record.token, layout=fwd.layout, graph=graph,
                         attention=fwd.attention, hidden=fwd.prefix[:-1], lens=lens)

    def answer_log_probs(self, image: np.ndarray, prompt: Sequence[int], answer: Sequence[int]) -> np.ndarray:
        """log P(y_t | y_<t, image) for every ground-truth answer token, teacher forced"""
        if len(answer) == 0:
            raise ModelError("answer must contain at least one token")
        answer = [int(t) for t in answer]
        self._check_ids(answer, "answer")
        graph = tc.ComputeGraph(record=False)
        fwd = self._forward(graph, image, prompt, [BOS_TOKEN_ID] + answer[:-1])
        log_probs = log_softmax(self._final_logits(fwd).values, axis=-1)
        return log_probs[np.arange(len(answer)), answer]

    def loss_graph(self, graph: tc.ComputeGraph, image, prompt, answer) -> Tuple[tc.DiffTensor, Dict[str, tc.DiffTensor]]:
        """Mean answer cross entropy with trainable parameter leaves"""
        answer = [int(t) for t in answer]
        fwd = self._forward(graph, image, prompt, [BOS_TOKEN_ID] + answer[:-1], trainable=True)
        return tc.cross_entropy_rows(self._final_logits(fwd), answer), fwd.params


class Adam:
    """Adaptive-moment optimizer over a name -> array parameter dict"""

    def __init__(self, params: Dict[str, np.ndarray], lr: float = ADAM_LR,
                 betas: Tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(v) for name, v in params.items()}
        self.v = {name: np.zeros_like(v) for name, v in params.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            # rebinding keeps arrays already shared with graphs untouched
            self.params[name] = self.params[name] - self.lr * update


def train(model: ToyVLM, examples: Sequence[Example], spec: TrainingSpec, seed: int = 0) -> List[float]:
    """Minimise answer-token cross entropy; returns the mean loss of every epoch"""
    if len(examples) == 0:
        raise TrainingError("training set is empty")
    for i, ex in enumerate(examples):
        if len(ex.answer_ids) == 0:
            raise TrainingError(f"example {i} has an empty answer")
        if max(ex.answer_ids) >= model.config.vocab_size or min(ex.answer_ids) < 0:
            raise TrainingError(f"example {i} has answer tokens outside vocabulary of size {model.config.vocab_size}")

    optimizer = Adam(model.params, lr=spec.lr)
    rng = np.random.default_rng(seed)
    curve: List[float] = []
    logger.info(f"Training {model.config.arch.value} model ({model.n_parameters()} parameters) "
                f"on {len(examples)} examples for {spec.epochs} epochs")

    for epoch in range(1, spec.epochs + 1):
        order = rng.permutation(len(examples))
        losses: List[float] = []
        for start in range(0, len(order), spec.batch_size):
            batch = order[start:start + spec.batch_size]
            grads = {name: np.zeros_like(value) for name, value in model.params.items()}
            for idx in batch:
                ex = examples[int(idx)]
                graph = tc.ComputeGraph(record=True)
                loss, leaves = model.loss_graph(graph, ex.image, ex.prompt_ids, ex.answer_ids)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, example {int(idx)}")
                tc.reverse_sweep(graph, loss)
                for name, leaf in leaves.items():
                    grads[name] += leaf.grad
                losses.append(value)
            optimizer.step({name: g / len(batch) for name, g in grads.items()})

        mean = math.fsum(losses) / len(losses)
        curve.append(mean)
        logger.info(f"epoch {epoch}/{spec.epochs} mean loss {mean:.6f}")
        if spec.target_loss is not None and mean <= spec.target_loss:
            logger.info(f"target loss {spec.target_loss} reached after {epoch} epochs")
            break
    return curve


# --- checkpoint -----------------------------------------------------------------

_HEADER_SIZE = struct.Struct("<Q")


def checkpoint_bytes(model: ToyVLM, record: Optional[TrainingRecord] = None) -> bytes:
    """8-byte header length, JSON header, then little-endian f64 parameters in name order"""
    names = sorted(model.params)
    entries, offset = [], 0
    for name in names:
        value = model.params[name]
        entries.append(ParameterEntry(name=name, shape=list(value.shape), offset=offset, length=int(value.size)))
        offset += int(value.size) * 8
    header = CheckpointHeader(config=model.config, record=record, parameters=entries).model_dump_json().encode()
    payload = b"".join(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in names)
    return _HEADER_SIZE.pack(len(header)) + header + payload


def parse_checkpoint(blob: bytes) -> Tuple[ToyVLM, CheckpointHeader]:
    if len(blob) < _HEADER_SIZE.size:
        raise ModelError(f"checkpoint truncated: {len(blob)} bytes")
    (size,) = _HEADER_SIZE.unpack_from(blob, 0)
    start = _HEADER_SIZE.size + size
    if start > len(blob):
        raise ModelError(f"checkpoint header claims {size} bytes but file has {len(blob)}")
    try:
        header = CheckpointHeader.model_validate_json(blob[_HEADER_SIZE.size:start])
    except ValidationError as e:
        raise ModelError(f"invalid checkpoint header: {e}") from e
    params = {}
    for entry in header.parameters:
        lo = start + entry.offset
        hi = lo + entry.length * 8
        if hi > len(blob):
            raise ModelError(f"parameter {entry.name} extends past end of checkpoint (byte {hi})")
        params[entry.name] = np.frombuffer(blob[lo:hi], dtype="<f8").astype(np.float64).reshape(entry.shape)
    return ToyVLM(header.config, params), header


async def save_checkpoint(model: ToyVLM, path: str, record: Optional[TrainingRecord] = None) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    async with aiofiles.open(path, "wb") as f:
        await f.write(checkpoint_bytes(model, record))
    logger.info(f"Saved checkpoint to {path}")


async def read_checkpoint(path: str) -> Tuple[ToyVLM, CheckpointHeader]:
    if not os.path.exists(path):
        raise ModelError(f"checkpoint not found: {path}")
    async with aiofiles.open(path, "rb") as f:
        blob = await f.read()
    return parse_checkpoint(blob)
