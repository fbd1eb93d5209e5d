"""Tests for layer error profiling and budget allocation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from conftest import make_task
from idiokv.allocator import (
    BudgetPlan,
    LayerErrorProfile,
    allocate,
    block_outputs,
    default_bounds,
    l1_normalize,
    profile_layer_errors,
    relative_errors,
    round_half_away,
    uniform_plan,
)
from idiokv.errors import ConfigError, InfeasibleBudgetError
from idiokv.model import teacher_forced_decode
from idiokv.policies import SnapKVPolicy


def transcribed_allocation(errors, total, m, big_m):
    """Straight-line rendition of the allocation loop."""
    n = len(errors)
    budgets = [m] * n
    remaining = total - m * n
    for i in range(n):
        share = errors[i] * remaining
        rounded = math.floor(share + 0.5)
        budgets[i] = min(max(budgets[i] + rounded, m), big_m)
    while sum(budgets) != total:
        if sum(budgets) < total:
            best = None
            for i in range(n):
                if budgets[i] < big_m and (best is None or errors[i] > errors[best]):
                    best = i
            budgets[best] += 1
        else:
            worst = None
            for i in range(n):
                if budgets[i] > m and (worst is None or errors[i] < errors[worst]):
                    worst = i
            budgets[worst] -= 1
    return budgets


def test_allocate_matches_transcription():
    errors = [0.4, 0.3, 0.2, 0.1]
    plan = allocate(errors, 400, 32, 300)
    assert plan.budgets == transcribed_allocation(errors, 400, 32, 300)
    assert plan.budgets == [141, 114, 86, 59]
    assert sum(plan.budgets) == 400


def test_uniform_errors_give_equal_budgets():
    assert allocate([0.25] * 4, 400, 32, 300).budgets == [100] * 4
    assert allocate([1 / 32] * 32, 8192, 32, 768).budgets == [256] * 32


def test_default_bounds():
    assert default_bounds(32 * 256, 32) == (32, 768)
    assert default_bounds(2 * 128, 2) == (32, 384)
    m, big_m = default_bounds(32 * 5, 5)
    assert (m, big_m) == (32, 96)
    assert allocate([0.5, 0.2, 0.1, 0.1, 0.1], 160, m, big_m).budgets == [32] * 5
    with pytest.raises(InfeasibleBudgetError):
        default_bounds(100, 4)


@pytest.mark.parametrize(
    "errors, total, m, big_m",
    [
        ([0.5, 0.5], 63, 32, 100),
        ([0.5, 0.5], 201, 32, 100),
        ([0.5, 0.5], 100, 60, 50),
        ([0.5, -0.1], 100, 32, 100),
        ([], 100, 32, 100),
    ],
)
def test_allocate_rejects_infeasible_instances(errors, total, m, big_m):
    with pytest.raises(InfeasibleBudgetError):
        allocate(errors, total, m, big_m)


def check_plan(plan: BudgetPlan, errors, total, m, big_m):
    assert sum(plan.budgets) == total
    assert all(m <= b <= big_m for b in plan.budgets)
    assert plan.iterations <= len(errors) * (big_m - m) + 1


def test_allocate_conservation_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        layers = int(rng.integers(1, 17))
        m = int(rng.integers(1, 64))
        big_m = m + int(rng.integers(0, 300))
        total = int(rng.integers(layers * m, layers * big_m + 1))
        raw = rng.random(layers) * (rng.random(layers) > 0.2)
        errors = l1_normalize(raw).tolist()
        plan = allocate(errors, total, m, big_m)
        check_plan(plan, errors, total, m, big_m)
        assert plan.budgets == transcribed_allocation(errors, total, m, big_m)


@settings(max_examples=200, derandomize=True)
@given(
    raw=st.lists(st.floats(min_value=0.0, max_value=1e3), min_size=1, max_size=24),
    m=st.integers(min_value=1, max_value=64),
    span=st.integers(min_value=0, max_value=256),
    fraction=st.floats(min_value=0.0, max_value=1.0),
)
def test_allocate_conservation_property(raw, m, span, fraction):
    errors = l1_normalize(raw).tolist()
    big_m = m + span
    layers = len(errors)
    total = layers * m + int(fraction * layers * span)
    check_plan(allocate(errors, total, m, big_m), errors, total, m, big_m)


@settings(max_examples=200, derandomize=True)
@given(
    raw=st.lists(st.floats(min_value=0.0, max_value=1e3), min_size=2, max_size=24),
    m=st.integers(min_value=1, max_value=64),
    span=st.integers(min_value=0, max_value=256),
    fraction=st.floats(min_value=0.0, max_value=1.0),
)
def test_allocate_prefers_larger_errors(raw, m, span, fraction):
    errors = l1_normalize(raw).tolist()
    big_m = m + span
    layers = len(errors)
    total = layers * m + int(fraction * layers * span)
    budgets = allocate(errors, total, m, big_m).budgets
    free = [i for i, b in enumerate(budgets) if m < b < big_m]
    for i in free:
        for j in free:
            if errors[i] > errors[j]:
                assert budgets[i] >= budgets[j], (errors, budgets)


def test_allocate_prefers_larger_errors_example():
    plan = allocate([0.5, 0.3, 0.2], 90, 10, 60)
    assert plan.budgets == [40, 28, 22]
    assert plan.budgets == sorted(plan.budgets, reverse=True)


def test_round_half_away():
    assert [round_half_away(x) for x in (2.5, -2.5, 0.4, 1.5, 0.0)] == [3, -3, 0, 2, 0]


def test_uniform_plan_spreads_remainder_low():
    plan = uniform_plan(10, 3)
    assert plan.budgets == [4, 3, 3]
    assert plan.source == "uniform"
    with pytest.raises(InfeasibleBudgetError):
        uniform_plan(2, 3)


def test_plan_validation_and_csv():
    with pytest.raises(ValidationError):
        BudgetPlan(budgets=[10, 20], total=31, min_budget=1, max_budget=50)
    with pytest.raises(ValidationError):
        BudgetPlan(budgets=[10, 20], total=30, min_budget=15, max_budget=50)
    plan = BudgetPlan(budgets=[10, 20], total=30, min_budget=1, max_budget=50)
    assert plan.to_csv() == "layer,budget\n0,10\n1,20\n"


def test_l1_normalize():
    np.testing.assert_allclose(l1_normalize([1.0, 3.0]), [0.25, 0.75])
    np.testing.assert_allclose(l1_normalize([0.0, 0.0, 0.0, 0.0]), [0.25] * 4)


def test_profile_rejects_unnormalized_vectors():
    with pytest.raises(ValidationError):
        LayerErrorProfile(
            families=["a"],
            raw={"a": [1.0, 1.0]},
            per_family={"a": [0.5, 0.5]},
            averaged=[0.5, 0.5],
            normalized=[0.6, 0.6],
            epsilon=1e-6,
            probe_budget=16,
            decode_steps=1,
            mode="one_at_a_time",
            policy="snapkv",
            task_count=1,
        )


@pytest.mark.parametrize("mode", ["one_at_a_time", "joint"])
def test_identity_compression_has_zero_error(small_model, mode):
    tasks = [make_task(16, seed=s) for s in range(2)]
    profile = profile_layer_errors(
        small_model, tasks, 48, SnapKVPolicy(num_kv_heads=2), decode_steps=3, mode=mode
    )
    assert profile.raw["single_needle"] == [0.0, 0.0]
    assert profile.normalized == [0.5, 0.5]


def block_output_oracle(model, layer, x, keys, values, kept):
    cfg = model.config
    d = cfg.head_dim
    q = x @ model.layers[layer].w_q
    heads = np.zeros(cfg.num_q_heads * d)
    for h in range(cfg.num_q_heads):
        g = h // cfg.group_size
        scores = keys[g][kept] @ q[h * d : (h + 1) * d] / math.sqrt(d)
        p = np.exp(scores - scores.max())
        p /= p.sum()
        heads[h * d : (h + 1) * d] = p @ values[g][kept]
    return heads @ model.layers[layer].w_o


def test_profile_matches_stored_output_oracle(small_model):
    task = make_task(16, seed=9)
    policy = SnapKVPolicy(num_kv_heads=2)
    steps, probe, eps = 3, 12, 1e-6
    profile = profile_layer_errors(small_model, [task], probe, policy, decode_steps=steps, epsilon=eps)

    run = teacher_forced_decode(
        small_model, task.prompt_embeddings, task.answer_embeddings[:steps]
    )
    prompt_len = task.prompt_len
    errors = np.zeros(2)
    for layer in range(2):
        view = run.cache.view(layer)
        keep = policy.decide(run.trace, layer, probe).keep_indices
        for t in range(steps):
            generated = list(range(prompt_len, prompt_len + t + 1))
            x = run.layer_inputs[t][layer]
            full = block_output_oracle(
                small_model, layer, x, view.keys, view.values, list(range(prompt_len)) + generated
            )
            comp = block_output_oracle(
                small_model, layer, x, view.keys, view.values, keep + generated
            )
            errors[layer] += np.linalg.norm(comp - full) / (np.linalg.norm(full) + eps)

    expected = errors / errors.sum()
    np.testing.assert_allclose(profile.raw["single_needle"], errors, rtol=1e-9)
    np.testing.assert_allclose(profile.normalized, expected, rtol=1e-9)
    np.testing.assert_allclose(profile.normalized, profile.per_family["single_needle"], rtol=1e-12)
    assert math.fsum(profile.normalized) == pytest.approx(1.0, abs=1e-9)


def test_profile_averages_families(small_model):
    tasks = [
        make_task(16, seed=1, family="single_needle"),
        make_task(16, seed=2, family="decoy_needles"),
        make_task(16, seed=3, family="decoy_needles"),
    ]
    policy = SnapKVPolicy(num_kv_heads=2)
    profile = profile_layer_errors(small_model, tasks, 12, policy, decode_steps=2)
    assert profile.families == ["decoy_needles", "single_needle"]

    decoy = sum(relative_errors(*block_outputs(small_model, t, policy, 12, 2), 1e-6) for t in tasks[1:])
    np.testing.assert_allclose(profile.raw["decoy_needles"], decoy, rtol=1e-12)

    per_family = [np.asarray(profile.per_family[f]) for f in profile.families]
    for vec in per_family:
        assert vec.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(profile.averaged, (per_family[0] + per_family[1]) / 2)
    np.testing.assert_allclose(profile.normalized, l1_normalize(profile.averaged))
    assert math.fsum(profile.normalized) == pytest.approx(1.0, abs=1e-9)


def test_profile_argument_errors(small_model, small_task):
    policy = SnapKVPolicy(num_kv_heads=2)
    with pytest.raises(ConfigError):
        profile_layer_errors(small_model, [], 12, policy)
    with pytest.raises(ConfigError):
        profile_layer_errors(small_model, [small_task], 12, policy, decode_steps=0)
    with pytest.raises(ConfigError):
        profile_layer_errors(small_model, [small_task], 12, policy, decode_steps=7)
    with pytest.raises(ConfigError):
        profile_layer_errors(small_model, [small_task], 12, policy, decode_steps=2, mode="greedy")
    with pytest.raises(InfeasibleBudgetError):
        profile_layer_errors(small_model, [small_task], 8, policy, decode_steps=2)


def test_profile_is_identical_across_worker_counts(small_model):
    tasks = [make_task(16, seed=s) for s in range(3)]
    policy = SnapKVPolicy(num_kv_heads=2)
    one = profile_layer_errors(small_model, tasks, 12, policy, decode_steps=2, workers=1)
    many = profile_layer_errors(small_model, tasks, 12, policy, decode_steps=2, workers=3)
    assert one == many
