"""Tests for head scoring, selection and masking."""

import numpy as np
import pytest

from conftest import make_task
from idiokv.errors import ArtifactError, HeadScoreError
from idiokv.harness.planting import build_planted_model
from idiokv.harness.traces import (
    SEMANTIC_RETRIEVAL,
    generate_planted_trace,
    identification_labels,
)
from idiokv.heads import (
    AnswerSpan,
    HeadScoreDocument,
    HeadScoreTable,
    calibrate_heads,
    copy_paste_retrieval_score,
    mask_heads,
    score_heads,
    select_top_heads,
    select_top_heads_global,
    semantic_retrieval_score,
)
from idiokv.model import AttentionTrace, teacher_forced_decode

SPAN = AnswerSpan((2, 3), frozenset({101, 102}))


def single_layer_trace(prompt_len: int, step_rows) -> AttentionTrace:
    """One-layer trace whose decode rows are given per step as (heads, width)."""
    rows = [np.atleast_2d(np.asarray(r, dtype=np.float64)) for r in step_rows]
    heads = rows[0].shape[0] if rows else 1
    trace = AttentionTrace(prefill=[np.zeros((heads, prompt_len, prompt_len))])
    for r in rows:
        trace.add_decode_step([r], [np.arange(r.shape[1])])
    return trace


def test_no_answer_tokens_scores_zero():
    trace = single_layer_trace(5, [[0.1, 0.1, 0.4, 0.3, 0.05, 0.05]] * 2)
    np.testing.assert_array_equal(semantic_retrieval_score(trace, [7, 8], SPAN), [[0.0]])
    np.testing.assert_array_equal(copy_paste_retrieval_score(trace, [7, 8], SPAN), [[0.0]])


def test_semantic_score_hand_example():
    trace = single_layer_trace(
        5,
        [
            [0.2, 0.1, 0.3, 0.2, 0.1, 0.1, 0.0],
            [0.4, 0.2, 0.1, 0.1, 0.1, 0.05, 0.05],
        ],
    )
    score = semantic_retrieval_score(trace, [101, 102], SPAN)
    assert score[0, 0] == pytest.approx(0.7)


def test_semantic_score_uniform_closed_form():
    width, steps = 20, 3
    span = AnswerSpan((4, 5, 6, 7), frozenset({1}))
    trace = single_layer_trace(12, [np.full((2, width), 1.0 / width)] * steps)
    score = semantic_retrieval_score(trace, [1, 1, 1], span)
    np.testing.assert_allclose(score, [[steps * 4 / width] * 2])


def test_copy_paste_scores():
    sink_heavy = [0.5, 0.1, 0.2, 0.1, 0.1]
    on_span = [0.1, 0.1, 0.6, 0.1, 0.1]
    streaming = single_layer_trace(4, [sink_heavy, sink_heavy])
    assert copy_paste_retrieval_score(streaming, [101, 102], SPAN)[0, 0] == 0.0

    mixed = single_layer_trace(4, [on_span, sink_heavy])
    assert copy_paste_retrieval_score(mixed, [101, 102], SPAN)[0, 0] == 0.5


def test_copy_paste_ties_resolve_to_first_column():
    trace = single_layer_trace(4, [[0.3, 0.1, 0.3, 0.2, 0.1]])
    assert copy_paste_retrieval_score(trace, [101], SPAN)[0, 0] == 0.0


def test_scores_use_positions_after_eviction():
    trace = AttentionTrace(prefill=[np.zeros((1, 6, 6))])
    trace.add_decode_step([np.array([[0.2, 0.5, 0.3]])], [np.array([0, 3, 6])])
    assert semantic_retrieval_score(trace, [101], SPAN)[0, 0] == 0.5
    assert copy_paste_retrieval_score(trace, [101], SPAN)[0, 0] == 1.0


def test_scoring_rejects_inconsistent_inputs():
    trace = single_layer_trace(3, [[0.5, 0.25, 0.25, 0.0]])
    with pytest.raises(HeadScoreError):
        semantic_retrieval_score(trace, [101, 102], SPAN)
    with pytest.raises(HeadScoreError):
        semantic_retrieval_score(trace, [101], AnswerSpan((2, 3, 4), frozenset({101})))
    with pytest.raises(HeadScoreError):
        AnswerSpan((), frozenset())


def naive_semantic_score(trace, generated, span):
    out = np.zeros((trace.num_layers, trace.num_heads))
    for layer in range(trace.num_layers):
        for head in range(trace.num_heads):
            total = 0.0
            for t, token in enumerate(generated):
                if token not in span.answer_token_ids:
                    continue
                positions = list(trace.decode_positions[t][layer])
                for j in span.positions:
                    if j in positions:
                        total += trace.decode[t][layer][head, positions.index(j)]
            out[layer, head] = total
    return out


@pytest.mark.parametrize("seed", range(100))
def test_semantic_score_matches_naive_double_sum(seed):
    rng = np.random.default_rng(seed)
    layers, heads = int(rng.integers(1, 4)), int(rng.integers(1, 6))
    prompt_len, steps = int(rng.integers(8, 30)), int(rng.integers(1, 6))
    start = int(rng.integers(0, prompt_len - 3))
    span = AnswerSpan(tuple(range(start, start + 3)), frozenset({10, 11, 12}))

    trace = AttentionTrace(prefill=[np.zeros((heads, prompt_len, prompt_len))] * layers)
    for t in range(steps):
        width = prompt_len + t + 1
        rows = [rng.dirichlet(np.ones(width), size=heads) for _ in range(layers)]
        trace.add_decode_step(rows, [np.arange(width)] * layers)
    generated = rng.choice([10, 11, 12, 99], size=steps).tolist()

    np.testing.assert_array_equal(
        semantic_retrieval_score(trace, generated, span),
        naive_semantic_score(trace, generated, span),
    )


def test_select_top_heads_tie_rule():
    table = HeadScoreTable([[0.1, 0.5, 0.5, 0.2]], np.zeros((1, 4)))
    assert select_top_heads(table, 0, 2) == [1, 2]
    assert select_top_heads(table, 0, 4) == [1, 2, 3, 0]
    assert select_top_heads(table, 0, 1, candidates=[0, 3]) == [3]


@pytest.mark.parametrize("k, layer", [(0, 0), (5, 0), (1, 1)])
def test_select_top_heads_rejects_bad_arguments(k, layer):
    table = HeadScoreTable([[0.1, 0.5, 0.5, 0.2]], np.zeros((1, 4)))
    with pytest.raises(HeadScoreError):
        select_top_heads(table, layer, k)


def test_select_top_heads_global_ordering():
    table = HeadScoreTable([[0.2, 0.9], [0.9, 0.1]], [[0.0, 0.0], [0.0, 1.0]])
    assert select_top_heads_global(table, 3) == [(0, 1), (1, 0), (0, 0)]
    assert select_top_heads_global(table, 1, "copy_paste") == [(1, 1)]
    with pytest.raises(HeadScoreError):
        select_top_heads_global(table, 5)


def identification_trial(seed: int):
    rng = np.random.default_rng(seed)
    labels = identification_labels(seed)
    start = int(rng.integers(4, 128 - 8 - 6 + 1))
    planted = generate_planted_trace(labels, 128, 8, (start, 6), seed)
    table = score_heads(planted.trace, planted.generated_ids, planted.span)
    return planted, table


def test_retrieval_heads_score_without_copying():
    planted, table = identification_trial(3)
    for layer, head in planted.heads_with(SEMANTIC_RETRIEVAL):
        assert table.semantic[layer, head] > 0
        assert table.copy_paste[layer, head] == 0.0


def test_planted_retrieval_heads_are_identified():
    recovered = 0
    for seed in range(100):
        planted, table = identification_trial(seed)
        hits = []
        for layer in range(planted.trace.num_layers):
            expected = {h for l, h in planted.heads_with(SEMANTIC_RETRIEVAL) if l == layer}
            hits.append(set(select_top_heads(table, layer, 4)) == expected)
        recovered += all(hits)
    assert recovered >= 99


def test_table_merge_and_normalize():
    a = HeadScoreTable([[1.0, 3.0], [0.0, 0.0]], np.zeros((2, 2)))
    b = HeadScoreTable([[1.0, 1.0], [0.0, 0.0]], np.ones((2, 2)))
    merged = a.merge(b)
    assert merged.prompt_count == 2
    np.testing.assert_array_equal(merged.semantic, [[2.0, 4.0], [0.0, 0.0]])
    np.testing.assert_allclose(merged.normalized(), [[1 / 3, 2 / 3], [0.0, 0.0]])
    with pytest.raises(HeadScoreError):
        a.merge(HeadScoreTable.zeros(1, 2))


def test_table_rejects_negative_scores():
    with pytest.raises(HeadScoreError):
        HeadScoreTable([[-0.1]], [[0.0]])
    with pytest.raises(HeadScoreError):
        HeadScoreTable.zeros(1, 1).scores("induction")


def test_table_json_round_trip(tmp_path):
    table = HeadScoreTable([[0.25, 0.5]], [[0.0, 1.0]], prompt_count=3, model_fingerprint="abc")
    path = table.save_json(tmp_path / "scores.json")
    loaded = HeadScoreTable.load_json(path)
    np.testing.assert_array_equal(loaded.semantic, table.semantic)
    assert loaded.prompt_count == 3
    assert loaded.model_fingerprint == "abc"
    assert table.to_csv().splitlines()[0] == "layer,head0,head1"


def test_table_document_must_cover_every_head(tmp_path):
    doc = HeadScoreTable.zeros(1, 2).to_document()
    doc.records = doc.records[:1]
    with pytest.raises(HeadScoreError):
        HeadScoreTable.from_document(HeadScoreDocument.model_validate(doc.model_dump()))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ArtifactError):
        HeadScoreTable.load_json(bad)


def test_mask_heads_on_trace():
    trace = single_layer_trace(4, [np.full((3, 5), 0.2)])
    masked = mask_heads(trace, [(0, 1)])
    assert masked.active_heads(0) == [0, 2]
    assert trace.active_heads(0) == [0, 1, 2]
    with pytest.raises(HeadScoreError):
        mask_heads(trace, [(0, 3)])
    with pytest.raises(TypeError):
        mask_heads("not a model", [(0, 0)])


def test_calibration_sums_tasks_in_order(small_model):
    tasks = [make_task(16, seed=s) for s in range(3)]
    table = calibrate_heads(small_model, tasks, workers=2)
    assert table.prompt_count == 3
    assert table.model_fingerprint == small_model.fingerprint()

    expected = np.zeros((2, 4))
    for task in tasks:
        run = teacher_forced_decode(small_model, task.prompt_embeddings, task.answer_embeddings)
        expected += score_heads(run.trace, task.generated_ids, task.span).semantic
    np.testing.assert_array_equal(table.semantic, expected)
    np.testing.assert_array_equal(calibrate_heads(small_model, tasks, workers=1).semantic, expected)


def test_calibration_needs_tasks(small_model):
    with pytest.raises(HeadScoreError):
        calibrate_heads(small_model, [])


def test_planted_model_ranks_retrieval_heads_first():
    model = build_planted_model(seed=0)
    tasks = [make_task(model.config.hidden_dim, seed=s, prompt_len=96) for s in range(4)]
    table = calibrate_heads(model, tasks)
    roles = model.roles[0]
    top = select_top_heads(table, 0, 8)
    assert {roles[h] for h in top} == {SEMANTIC_RETRIEVAL}


def random_decode_trace(rng, prompt_len: int = 16, steps: int = 5, heads: int = 3) -> AttentionTrace:
    rows = []
    for t in range(steps):
        logits = rng.normal(scale=2.0, size=(heads, prompt_len + t + 1))
        weights = np.exp(logits)
        rows.append(weights / weights.sum(axis=1, keepdims=True))
    trace = AttentionTrace(prefill=[np.zeros((heads, prompt_len, prompt_len))])
    for r in rows:
        trace.add_decode_step([r], [np.arange(r.shape[1])])
    return trace


@pytest.mark.parametrize("seed", range(10))
def test_semantic_score_grows_with_the_span(seed):
    rng = np.random.default_rng(seed)
    trace = random_decode_trace(rng)
    generated = [int(t) for t in rng.choice([7, 8, 9], size=5)]
    ids = frozenset({7, 8})
    start = int(rng.integers(0, 10))
    narrow = AnswerSpan((start, start + 1), ids)
    wide = AnswerSpan(tuple(range(max(0, start - 2), start + 5)), ids)
    assert np.all(
        semantic_retrieval_score(trace, generated, wide)
        >= semantic_retrieval_score(trace, generated, narrow)
    )


@pytest.mark.parametrize("seed", range(10))
def test_semantic_score_is_bounded_by_qualifying_steps(seed):
    rng = np.random.default_rng(seed)
    trace = random_decode_trace(rng)
    generated = [int(t) for t in rng.choice([7, 9], size=5)]
    span = AnswerSpan(tuple(range(16)), frozenset({7}))
    qualifying = sum(token == 7 for token in generated)
    score = semantic_retrieval_score(trace, generated, span)
    assert np.all(score <= qualifying + 1e-9)
    assert np.all(score >= 0.0)


@pytest.mark.parametrize("factor", [1e-3, 0.5, 3.7, 1e3])
def test_select_top_heads_ignores_scale(factor):
    scores = [[3.0, 1.0, 4.0, 1.0, 5.0, 0.0, 2.0, 4.0]]
    table = HeadScoreTable(scores, np.zeros((1, 8)))
    scaled = HeadScoreTable(np.asarray(scores) * factor, np.zeros((1, 8)))
    for k in range(1, 9):
        assert select_top_heads(scaled, 0, k) == select_top_heads(table, 0, k)
    assert select_top_heads(table, 0, 3) == [4, 2, 7]
