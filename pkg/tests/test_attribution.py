import json
import os

import numpy as np
import pytest

from app.attribution import (
    GradientBank,
    StepGradients,
    baseline_gradcam,
    baseline_raw_attention,
    baseline_rollout,
    chefercam_contribution,
    dexar,
    dexar_sequence_map,
    dexar_token_map,
    explain,
    grad_wrt_attention,
    head_scores,
    normalize_map,
    rollout_matrices,
    split_visual_text,
    token_weight,
    write_attribution_dump,
)
from app.config import KNOWN_METHODS
from app.errors import AttributionError, UnsupportedArchitectureError
from app.models import Architecture, AttributionConfig, HeadScoring
from app.toyvlm import TokenLayout, ToyVLM


def test_normalize_map_range_and_constant():
    x = np.array([2.0, 4.0, 3.0])
    np.testing.assert_allclose(normalize_map(x), [0.0, 1.0, 0.5])
    np.testing.assert_array_equal(normalize_map(np.full(4, 7.0)), np.zeros(4))


def test_split_visual_text():
    layout = TokenLayout(n_visual=3, n_context=2, n_answer=1)
    row = np.arange(12.0).reshape(2, 6)
    v, t = split_visual_text(row, layout)
    np.testing.assert_array_equal(v, row[:, :3])
    np.testing.assert_array_equal(t, row[:, 3:])
    with pytest.raises(AttributionError):
        split_visual_text(row[:, :5], layout)


def test_head_scores_max_mode_gates_text_dominated_heads():
    grad_v = np.array([[0.5, 0.2], [0.1, 0.1]])
    grad_text = np.array([[0.3, 0.0], [0.4, 0.2]])
    scores = head_scores(grad_v, grad_text)
    assert [s.s_img for s in scores] == [0.5, 0.1]
    assert [s.s_text for s in scores] == [0.3, 0.4]
    assert scores[0].w == pytest.approx(0.2)
    assert scores[1].w == 0.0


def test_head_scores_avg_and_topk():
    grad_v = np.array([[1.0, 0.0, 0.0, 0.0]])
    grad_text = np.array([[0.3, 0.3]])
    avg = head_scores(grad_v, grad_text, HeadScoring.AVG)[0]
    assert avg.s_img == pytest.approx(0.25)
    assert avg.w == 0.0
    top = head_scores(grad_v, grad_text, HeadScoring.TOPK, fraction=0.25)[0]
    assert top.s_img == pytest.approx(1.0)
    assert top.w == pytest.approx(0.7)
    full = head_scores(grad_v, grad_text, HeadScoring.TOPK, fraction=1.0)[0]
    assert full.s_img == pytest.approx(avg.s_img)
    with pytest.raises(AttributionError):
        head_scores(grad_v, grad_text, HeadScoring.TOPK, fraction=0.0)


def test_dexar_token_map_matches_direct_computation(model, trace):
    config = AttributionConfig()
    bank = GradientBank(model, trace)
    n = model.config.n_visual
    for t in (1, trace.n_steps):
        expected = np.zeros(n)
        for layer in range(1, model.layers + 1):
            g = np.maximum(grad_wrt_attention(bank, layer, t), 0.0)
            w = np.maximum(g[:, :n].max(axis=1) - g[:, n:].max(axis=1), 0.0)
            expected += (w[:, None] * g[:, :n]).sum(axis=0)
        raw, grid, scores = dexar_token_map(bank, t, config)
        np.testing.assert_allclose(raw, expected, rtol=1e-12, atol=1e-15)
        assert grid.shape == (model.config.grid_h, model.config.grid_w)
        assert len(scores) == model.layers * model.config.heads


def test_head_filtering_off_sums_every_head(model, trace):
    bank = GradientBank(model, trace)
    n = model.config.n_visual
    expected = sum(np.maximum(grad_wrt_attention(bank, l, 2), 0.0)[:, :n].sum(axis=0)
                   for l in range(1, model.layers + 1))
    raw, _, _ = dexar_token_map(bank, 2, AttributionConfig(head_filtering=False))
    np.testing.assert_allclose(raw, expected, rtol=1e-12, atol=1e-15)


def test_token_weight_is_global_max_difference(model, trace):
    bank = GradientBank(model, trace)
    n = model.config.n_visual
    grads = [np.maximum(grad_wrt_attention(bank, l, 1), 0.0) for l in range(1, model.layers + 1)]
    best_img = max(g[:, :n].max() for g in grads)
    best_text = max(g[:, n:].max() for g in grads)
    assert token_weight(bank, 1, AttributionConfig()) == pytest.approx(max(best_img - best_text, 0.0))


def test_token_weight_ignores_layer_selection(model, trace):
    bank = GradientBank(model, trace)
    n = model.config.n_visual
    for t in range(1, trace.n_steps + 1):
        grads = [np.maximum(grad_wrt_attention(bank, l, t), 0.0) for l in range(1, model.layers + 1)]
        expected = max(max(g[:, :n].max() for g in grads) - max(g[:, n:].max() for g in grads), 0.0)
        for layers in ([model.layers], [1], None):
            assert token_weight(bank, t, AttributionConfig(layers_used=layers)) == expected


def test_last_layer_only_keeps_global_token_weights(model, trace):
    bank = GradientBank(model, trace)
    full = dexar(model, trace, AttributionConfig(), bank)
    last = dexar(model, trace, AttributionConfig(layers_used=[model.layers]), bank)
    np.testing.assert_array_equal(last.token_weights, full.token_weights)


class EditedBank(GradientBank):
    """Gradient bank whose attention gradients pass through ``edit(root, layer, step, grad)``"""

    def __init__(self, base: GradientBank, edit):
        super().__init__(base.model, base.trace)
        self.base = base
        self.edit = edit

    def step(self, t):
        if t not in self._steps:
            s = self.base.step(t)
            attention = {root: [self.edit(root, layer, t, g.copy()) for layer, g in enumerate(grads, start=1)]
                         for root, grads in s.attention.items()}
            self._steps[t] = StepGradients(t, s.layout, attention, s.hidden)
        return self._steps[t]


def test_normalised_maps_ignore_positive_gradient_scaling(model, trace):
    base = GradientBank(model, trace)
    plain = dexar(model, trace, bank=base)
    scaled = dexar(model, trace, bank=EditedBank(base, lambda root, layer, t, g: 3.0 * g))
    for raw, raw3, grid, grid3 in zip(plain.per_token_raw, scaled.per_token_raw,
                                      plain.per_token_grid, scaled.per_token_grid):
        np.testing.assert_allclose(raw3, 9.0 * raw, rtol=1e-12, atol=1e-300)
        np.testing.assert_allclose(grid3, grid, rtol=0, atol=1e-12)
    np.testing.assert_allclose(scaled.token_weights, 3.0 * plain.token_weights, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(scaled.sequence_grid, plain.sequence_grid, rtol=0, atol=1e-12)


def test_single_visual_head_gives_that_heads_row(model, trace):
    n = model.config.n_visual
    rng = np.random.default_rng(8)
    visual = {}

    def edit(root, layer, t, g):
        if root != layer:
            return g
        row = g[:, -1, :]
        row[:, :n] = rng.random((row.shape[0], n))
        row[:, n:] = 2.0 + rng.random((row.shape[0], row.shape[1] - n))
        if layer == model.layers:
            row[0, :n] += 0.1
            row[0, n:] = -rng.random(row.shape[1] - n)
            visual[t] = row[0, :n].copy()
        return g

    bank = EditedBank(GradientBank(model, trace), edit)
    for t in range(1, trace.n_steps + 1):
        raw, grid, scores = dexar_token_map(bank, t, AttributionConfig())
        assert [(s.layer, s.head) for s in scores if s.w > 0] == [(model.layers, 0)]
        np.testing.assert_allclose(raw, visual[t].max() * visual[t], rtol=1e-12)
        np.testing.assert_allclose(grid, normalize_map(visual[t]).reshape(grid.shape), atol=1e-12)


def test_step_without_visual_gradient_drops_out(model, trace):
    n = model.config.n_visual
    silent = 2

    def edit(root, layer, t, g):
        if t == silent:
            g[:, -1, :n] = 0.0
        return g

    base = GradientBank(model, trace)
    plain = dexar(model, trace, bank=base)
    amap = dexar(model, trace, bank=EditedBank(base, edit))
    assert amap.token_weights[silent - 1] == 0.0
    np.testing.assert_array_equal(amap.per_token_raw[silent - 1], np.zeros(n))
    keep = [i for i in range(trace.n_steps) if i != silent - 1]
    np.testing.assert_array_equal(amap.token_weights[keep], plain.token_weights[keep])
    raw, grid = dexar_sequence_map([plain.per_token_grid[i] for i in keep], plain.token_weights[keep])
    np.testing.assert_allclose(amap.sequence_raw, raw, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(amap.sequence_grid, grid, atol=1e-12)


def test_dexar_sequence_map_weighted_sum():
    maps = [np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])]
    raw, grid = dexar_sequence_map(maps, [3.0, 1.0])
    np.testing.assert_array_equal(raw, [3.0, 1.0])
    np.testing.assert_array_equal(grid, [[1.0, 0.0]])
    with pytest.raises(AttributionError):
        dexar_sequence_map(maps, [1.0])
    with pytest.raises(AttributionError):
        dexar_sequence_map([], [])


def test_dexar_map_structure(arch_config, samples):
    model = ToyVLM(arch_config)
    sample = samples[0]
    trace = model.teacher_force(sample.image, sample.prompt_ids, sample.answer_ids)
    amap = dexar(model, trace)
    assert amap.tokens == trace.tokens
    assert len(amap.per_token_grid) == trace.n_steps
    assert np.all(amap.token_weights >= 0.0)
    np.testing.assert_array_equal(amap.sequence_weights, amap.token_weights)
    assert amap.sequence_grid.shape == (arch_config.grid_h, arch_config.grid_w)
    assert amap.sequence_grid.min() >= 0.0 and amap.sequence_grid.max() <= 1.0


def test_filler_filtering_off_weights_tokens_equally(model, trace):
    amap = dexar(model, trace, AttributionConfig(filler_filtering=False))
    np.testing.assert_array_equal(amap.sequence_weights, np.ones(trace.n_steps))
    expected = normalize_map(np.sum(amap.per_token_grid, axis=0))
    np.testing.assert_allclose(amap.sequence_grid, expected, atol=1e-12)


def test_layers_beyond_depth_rejected(model, trace):
    with pytest.raises(AttributionError):
        dexar(model, trace, AttributionConfig(layers_used=[model.layers + 1]))


def test_bank_requires_complete_trace(model, samples):
    sample = samples[0]
    trace = model.new_trace(sample.image, sample.prompt_ids)
    model.forward_step(trace)
    with pytest.raises(AttributionError):
        GradientBank(model, trace)


def test_raw_attention_is_head_mean_of_last_row(model, trace):
    amap = baseline_raw_attention(model, trace)
    n = model.config.n_visual
    record = trace.step(2)
    expected = sum(a[:, -1, :n].mean(axis=0) for a in record.attention)
    np.testing.assert_allclose(amap.per_token_raw[1], expected, atol=1e-15)
    np.testing.assert_array_equal(amap.token_weights, np.ones(trace.n_steps))


def test_rollout_rows_are_stochastic():
    rng = np.random.default_rng(0)
    for _ in range(100):
        size = int(rng.integers(3, 12))
        logits = rng.normal(size=(3, 2, size, size))
        attention = [np.exp(x) / np.exp(x).sum(axis=-1, keepdims=True) for x in logits]
        hats, joint = rollout_matrices(attention)
        for hat in hats:
            np.testing.assert_allclose(hat.sum(axis=-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(joint.sum(axis=-1), 1.0, atol=1e-6)


def test_rollout_single_layer_hand_example():
    hats, joint = rollout_matrices([np.full((1, 2, 2), 0.5)])
    np.testing.assert_allclose(hats[0], [[0.75, 0.25], [0.25, 0.75]], atol=1e-15)
    np.testing.assert_allclose(joint, hats[0], atol=1e-15)


def test_rollout_of_identity_attention_is_identity():
    attention = [np.broadcast_to(np.eye(5), (3, 5, 5)).copy() for _ in range(4)]
    hats, joint = rollout_matrices(attention)
    for hat in hats:
        np.testing.assert_array_equal(hat, np.eye(5))
    np.testing.assert_array_equal(joint, np.eye(5))


def test_rollout_on_trace_rows_are_stochastic(model, trace):
    for record in trace.steps:
        _, joint = rollout_matrices(record.attention)
        np.testing.assert_allclose(joint.sum(axis=-1), 1.0, atol=1e-6)


def test_rollout_unsupported_for_encoder_decoder(tiny_config, samples):
    model = ToyVLM(tiny_config.model_copy(update={"arch": Architecture.ENCODER_DECODER}))
    sample = samples[0]
    trace = model.teacher_force(sample.image, sample.prompt_ids, sample.answer_ids)
    with pytest.raises(UnsupportedArchitectureError):
        baseline_rollout(model, trace)


def test_chefercam_with_zero_gradients_has_no_visual_relevance():
    attention = [np.full((2, 5, 5), 0.2)] * 3
    grads = [np.zeros((2, 5, 5))] * 3
    np.testing.assert_array_equal(chefercam_contribution(attention, grads, 3), np.zeros(3))
    cross = [np.full((2, 2, 4), 0.25)]
    np.testing.assert_array_equal(chefercam_contribution(cross, [np.zeros((2, 2, 4))], 3, cross=True), np.zeros(3))


def test_chefercam_single_layer_update():
    attention = [np.eye(3)[None]]
    grads = [np.ones((1, 3, 3))]
    # R = I + ReLU(A * dA) @ I
    np.testing.assert_array_equal(chefercam_contribution(attention, grads, 2), [0.0, 0.0])
    grads = [np.full((1, 3, 3), 2.0)]
    attention = [np.full((1, 3, 3), 1.0 / 3.0)]
    np.testing.assert_allclose(chefercam_contribution(attention, grads, 2), [2.0 / 3.0, 2.0 / 3.0])


def test_gradcam_layer_validation(model, trace):
    with pytest.raises(AttributionError):
        baseline_gradcam(model, trace, layer=0)
    amap = baseline_gradcam(model, trace, layer=1)
    assert all(np.all(raw >= 0.0) for raw in amap.per_token_raw)


@pytest.mark.parametrize("method", KNOWN_METHODS)
def test_every_method_on_every_architecture(arch_config, samples, method):
    model = ToyVLM(arch_config)
    sample = samples[1]
    trace = model.teacher_force(sample.image, sample.prompt_ids, sample.answer_ids)
    if method == "rollout" and arch_config.arch == Architecture.ENCODER_DECODER:
        with pytest.raises(UnsupportedArchitectureError):
            explain(method, model, trace)
        return
    amap = explain(method, model, trace)
    assert amap.method == method
    assert len(amap.per_token_raw) == trace.n_steps
    assert all(raw.shape == (arch_config.n_visual,) for raw in amap.per_token_raw)
    assert amap.sequence_grid.min() >= 0.0 and amap.sequence_grid.max() <= 1.0


def test_explain_rejects_unknown_method(model, trace):
    with pytest.raises(AttributionError):
        explain("integrated_gradients", model, trace)


def test_gradient_bank_caches_steps(model, trace):
    bank = GradientBank(model, trace)
    assert bank.step(1) is bank.step(1)
    with pytest.raises(AttributionError):
        bank.attention_grad(model.layers + 1, 1, 1)


@pytest.mark.asyncio
async def test_attribution_dump(model, trace, tmp_path):
    amap = dexar(model, trace)
    directory = str(tmp_path / "dump")
    words = [f"w{i}" for i in range(trace.n_steps)]
    await write_attribution_dump(amap, directory, words)
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    assert manifest["method"] == "dexar"
    assert manifest["tokens"] == words
    assert manifest["grid_shape"] == [model.config.grid_h, model.config.grid_w]
    with open(os.path.join(directory, "sequence.f64"), "rb") as f:
        restored = np.frombuffer(f.read(), dtype="<f8").reshape(amap.sequence_grid.shape)
    np.testing.assert_array_equal(restored, amap.sequence_grid)
